//! Dense real matrix primitives shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>` (column-major). PSD roots go
//! through a symmetric eigendecomposition of `(K + Kᵀ)/2`, with eigenvalues
//! below a relative tolerance clamped to zero.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Relative eigenvalue tolerance used when none is supplied.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

/// Singular values (or eigenvalues of a PSD matrix), sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.0.iter().map(|s| s * s).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn ensure_finite(a: &DenseMatrix, what: &str) -> Result<()> {
    if let Some(pos) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what}: entry ({}, {}) is {}",
            pos % a.nrows().max(1),
            pos / a.nrows().max(1),
            a[pos]
        )));
    }
    Ok(())
}

fn same_shape(a: &DenseMatrix, b: &DenseMatrix, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

fn ensure_square(a: &DenseMatrix, op: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "{op}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// `Σ_ij A_ij B_ij`.
pub fn frobenius_inner(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    same_shape(a, b, "frobenius_inner")?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn singular_values(a: &DenseMatrix) -> Result<Spectrum> {
    ensure_finite(a, "singular_values")?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Spectrum(Vec::new()));
    }
    let mut values: Vec<f64> = a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(Spectrum(values))
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of the symmetric part of `a`, eigenvalues descending
/// with eigenvector columns in matching order.
pub fn sym_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    ensure_square(a, "sym_eigen")?;
    ensure_finite(a, "sym_eigen")?;
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Eigenvalues of the symmetric part of `a`, descending.
pub fn sym_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    ensure_square(a, "sym_eigenvalues")?;
    ensure_finite(a, "sym_eigenvalues")?;
    let mut values: Vec<f64> = symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(values)
}

/// Absolute clamping threshold for a relative tolerance, and the PSD check.
fn psd_threshold(values: &[f64], rel_tol: f64) -> Result<f64> {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let threshold = rel_tol * scale;
    if let Some(&min) = values.last() {
        if min < -threshold {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tol: threshold,
            });
        }
    }
    Ok(threshold)
}

/// Verifies that `a` is symmetric PSD up to `rel_tol` times its largest
/// eigenvalue magnitude and returns its eigenvalues (descending).
pub fn check_psd(a: &DenseMatrix, rel_tol: f64) -> Result<Vec<f64>> {
    let values = sym_eigenvalues(a)?;
    psd_threshold(&values, rel_tol)?;
    Ok(values)
}

fn spectral_map(values: &[f64], vectors: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let mapped = nalgebra::DVector::from_iterator(values.len(), values.iter().map(|&v| f(v)));
    let scaled = DenseMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * mapped[c]
    });
    symmetrize(&(scaled * vectors.transpose()))
}

/// Symmetric square root of a PSD matrix. Eigenvalues at or below
/// `rel_tol · λ_max` are treated as zero.
pub fn psd_sqrt(k: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix> {
    let (values, vectors) = sym_eigen(k)?;
    let threshold = psd_threshold(&values, rel_tol)?;
    Ok(spectral_map(&values, &vectors, |v| {
        if v <= threshold {
            0.0
        } else {
            v.sqrt()
        }
    }))
}

/// Pseudo-inverse square root: eigenvalues at or below `rel_tol · λ_max`
/// map to zero, the rest to `λ^{-1/2}`.
pub fn psd_pinv_sqrt(k: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix> {
    let (values, vectors) = sym_eigen(k)?;
    let threshold = psd_threshold(&values, rel_tol)?;
    Ok(spectral_map(&values, &vectors, |v| {
        if v <= threshold {
            0.0
        } else {
            1.0 / v.sqrt()
        }
    }))
}

/// `Tr(A^{1/2})` for PSD `a`, from its eigenvalues.
pub fn trace_sqrt(a: &DenseMatrix, rel_tol: f64) -> Result<f64> {
    let values = sym_eigenvalues(a)?;
    let threshold = psd_threshold(&values, rel_tol)?;
    Ok(values
        .iter()
        .filter(|&&v| v > threshold)
        .map(|v| v.sqrt())
        .sum())
}

/// Entrywise (Schur) product.
pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    same_shape(a, b, "hadamard")?;
    Ok(a.component_mul(b))
}
