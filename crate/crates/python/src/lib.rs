//! Python bindings. Matrices cross the boundary as row-major nested lists
//! with one row per sample.

use kernsim::io::{self, Dtype};
use kernsim::linalg::DenseMatrix;
use kernsim::representation::{FeatureGradientBatch, KernelRepresentation, Variant};
use kernsim::similarity::{self, Index};
use kernsim::sketch::{sketch_batches, SketchConfig, SketchMeta, SketchSummary};
use kernsim::{verify, Error};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        e if e.exit_code() == 4 => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Samples-by-dimension rows to a `dim × n` column-per-sample matrix.
fn columns_from_rows(rows: &[Vec<f64>]) -> Result<DenseMatrix, String> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err("rows have different lengths".into());
    }
    Ok(DenseMatrix::from_fn(dim, rows.len(), |i, j| rows[j][i]))
}

fn square_from_rows(rows: &[Vec<f64>]) -> Result<DenseMatrix, String> {
    let m = columns_from_rows(rows)?.transpose();
    if !m.is_square() {
        return Err(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        ));
    }
    Ok(m)
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn kernel(rows: &[Vec<f64>]) -> PyResult<KernelRepresentation> {
    let m = square_from_rows(rows).map_err(PyValueError::new_err)?;
    let n = m.nrows() as u64;
    KernelRepresentation::new(m, Variant::Feature, n, false).map_err(to_py)
}

/// Uncentered (or centered) CKA between two kernel matrices.
#[pyfunction]
#[pyo3(signature = (k1, k2, centering = false))]
fn cka(k1: Vec<Vec<f64>>, k2: Vec<Vec<f64>>, centering: bool) -> PyResult<f64> {
    Ok(similarity::cka(&kernel(&k1)?, &kernel(&k2)?, centering)
        .map_err(to_py)?
        .value)
}

/// Normalized Bures similarity between two kernel matrices.
#[pyfunction]
#[pyo3(signature = (k1, k2, centering = false))]
fn nbs(k1: Vec<Vec<f64>>, k2: Vec<Vec<f64>>, centering: bool) -> PyResult<f64> {
    Ok(similarity::nbs(&kernel(&k1)?, &kernel(&k2)?, centering)
        .map_err(to_py)?
        .value)
}

/// A sketched feature×gradient summary of one layer.
#[pyclass(name = "Summary", module = "pykernsim")]
struct PySummary(SketchSummary);

#[pymethods]
impl PySummary {
    /// Sketches `features` (n × d_f) and `gradients` (n × d_g).
    #[staticmethod]
    #[pyo3(signature = (features, gradients, buckets = 512, seed = 0, blocks = 1, track_mpsi = false, layer_id = 0, beta = 0.5))]
    #[allow(clippy::too_many_arguments)]
    fn sketch(
        features: Vec<Vec<f64>>,
        gradients: Vec<Vec<f64>>,
        buckets: usize,
        seed: u64,
        blocks: usize,
        track_mpsi: bool,
        layer_id: u32,
        beta: f64,
    ) -> PyResult<Self> {
        let f = columns_from_rows(&features).map_err(PyValueError::new_err)?;
        let g = columns_from_rows(&gradients).map_err(PyValueError::new_err)?;
        let batch = FeatureGradientBatch::new(f, g, 0, layer_id).map_err(to_py)?;
        let config = SketchConfig::new(buckets, seed, blocks).map_err(to_py)?;
        let meta = SketchMeta { layer_id, beta };
        sketch_batches(config, [&batch], track_mpsi, meta)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        io::read_ksum(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_ksum(path, &self.0).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let bytes = io::ksum_to_bytes(&self.0).map_err(to_py)?;
        Ok(pyo3::types::PyBytes::new(py, &bytes))
    }

    #[getter]
    fn buckets(&self) -> usize {
        self.0.buckets()
    }

    #[getter]
    fn samples(&self) -> u64 {
        self.0.samples()
    }

    #[getter]
    fn layer_id(&self) -> u32 {
        self.0.meta().layer_id
    }

    #[getter]
    fn trace_fg(&self) -> f64 {
        self.0.trace_fg()
    }

    /// The sketched `M × M` kernel of the given variant.
    #[pyo3(signature = (variant = "combined"))]
    fn kernel(&self, variant: &str) -> PyResult<Vec<Vec<f64>>> {
        let k = self
            .0
            .kernel(parse(variant)?, kernsim::linalg::DEFAULT_REL_TOL)
            .map_err(to_py)?;
        Ok(rows_of(k.matrix()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Summary(layer_id={}, samples={}, buckets={})",
            self.0.meta().layer_id,
            self.0.samples(),
            self.0.buckets()
        )
    }
}

/// Similarity of two summaries.
#[pyfunction]
#[pyo3(signature = (a, b, variant = "combined", index = "cka", centering = false))]
fn compare(
    a: &PySummary,
    b: &PySummary,
    variant: &str,
    index: &str,
    centering: bool,
) -> PyResult<f64> {
    let index: Index = parse(index)?;
    similarity::compare_summaries(&a.0, &b.0, parse(variant)?, index, centering)
        .map(|s| s.value)
        .map_err(to_py)
}

/// Reads an NNSH shard as `(features, gradients, first_index, layer_id)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn read_nnsh(path: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, u64, u32)> {
    let (b, _) = io::read_nnsh(path).map_err(to_py)?;
    Ok((
        rows_of(&b.features().transpose()),
        rows_of(&b.gradients().transpose()),
        b.first_index(),
        b.layer_id(),
    ))
}

#[pyfunction]
#[pyo3(signature = (path, features, gradients, first_index = 0, layer_id = 0, dtype = "f64"))]
fn write_nnsh(
    path: &str,
    features: Vec<Vec<f64>>,
    gradients: Vec<Vec<f64>>,
    first_index: u64,
    layer_id: u32,
    dtype: &str,
) -> PyResult<()> {
    let dtype = match dtype {
        "f64" => Dtype::F64,
        "f32" => Dtype::F32,
        other => {
            return Err(PyValueError::new_err(format!(
                "dtype must be f64 or f32, got {other}"
            )))
        }
    };
    let f = columns_from_rows(&features).map_err(PyValueError::new_err)?;
    let g = columns_from_rows(&gradients).map_err(PyValueError::new_err)?;
    let batch = FeatureGradientBatch::new(f, g, first_index, layer_id).map_err(to_py)?;
    io::write_nnsh(path, &batch, dtype).map_err(to_py)
}

/// Runs a property suite; returns `(passed, summary_line)`.
#[pyfunction]
#[pyo3(signature = (suite, trials = 100, seed = 0))]
fn run_suite(suite: &str, trials: usize, seed: u64) -> PyResult<(bool, String)> {
    let report = match suite {
        "alt" => verify::alt_suite(trials, seed),
        "sketch-bounds" => verify::sketch_bound_suite(trials, seed),
        "invariance" => verify::invariance_suite(trials, seed),
        other => return Err(PyValueError::new_err(format!("unknown suite `{other}`"))),
    }
    .map_err(to_py)?;
    Ok((report.passed, report.to_string()))
}

#[pymodule]
fn pykernsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySummary>()?;
    m.add_function(wrap_pyfunction!(cka, m)?)?;
    m.add_function(wrap_pyfunction!(nbs, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(read_nnsh, m)?)?;
    m.add_function(wrap_pyfunction!(write_nnsh, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
