//! Kernel ridge regression on sketched kernels, used as a classifier.
//!
//! One-hot targets are sketched with the same assignments as the features,
//! giving `T̃` (`C × M`). The model keeps `T̃ (K̃ + αI)⁻¹` and scores a test
//! point by multiplying with its kernel vector against the buckets.

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DEFAULT_REL_TOL};
use crate::representation::{FeatureGradientBatch, Variant};
use crate::sketch::{for_each_assignment, SketchConfig, SketchSummary};

/// Sign-hashed one-hot label sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchedTargets {
    matrix: DenseMatrix,
    config: SketchConfig,
    samples: u64,
}

impl SketchedTargets {
    /// `C × M`.
    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// Sketches the labels of samples `0..labels.len()`.
pub fn sketch_targets(
    labels: &[usize],
    classes: usize,
    config: &SketchConfig,
) -> Result<SketchedTargets> {
    if classes < 1 {
        return Err(Error::InvalidInput("need at least one class".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut t = DenseMatrix::zeros(classes, config.buckets());
    let scale = config.scale();
    for_each_assignment(config, 0, labels.len(), |j, slots| {
        for a in slots {
            t[(labels[j], a.column)] += f64::from(a.sign) * scale;
        }
    })?;
    Ok(SketchedTargets {
        matrix: t,
        config: *config,
        samples: labels.len() as u64,
    })
}

fn check_variant(variant: Variant) -> Result<()> {
    match variant {
        Variant::Feature | Variant::Gradient | Variant::Combined => Ok(()),
        other => Err(Error::InvalidInput(format!(
            "kernel regression supports the feature, gradient and combined variants, not {other}"
        ))),
    }
}

/// Kernel vectors of a block of test points against the buckets (`M × n`):
/// `F̃ᵀF*`, `G̃ᵀG*`, or their entrywise product.
pub fn kernel_vectors(
    summary: &SketchSummary,
    test: &FeatureGradientBatch,
    variant: Variant,
) -> Result<DenseMatrix> {
    check_variant(variant)?;
    let needs_f = variant != Variant::Gradient;
    let needs_g = variant != Variant::Feature;
    if needs_f && test.feature_dim() != summary.feature_dim() {
        return Err(Error::dim(format!(
            "test features have dimension {}, summary {}",
            test.feature_dim(),
            summary.feature_dim()
        )));
    }
    if needs_g && test.gradient_dim() != summary.gradient_dim() {
        return Err(Error::dim(format!(
            "test gradients have dimension {}, summary {}",
            test.gradient_dim(),
            summary.gradient_dim()
        )));
    }
    Ok(match variant {
        Variant::Feature => summary.feature_sketch().tr_mul(test.features()),
        Variant::Gradient => summary.gradient_sketch().tr_mul(test.gradients()),
        _ => summary
            .feature_sketch()
            .tr_mul(test.features())
            .component_mul(&summary.gradient_sketch().tr_mul(test.gradients())),
    })
}

/// Kernel vector of one test point.
pub fn kernel_vector(
    summary: &SketchSummary,
    f: &DVector<f64>,
    g: &DVector<f64>,
    variant: Variant,
) -> Result<DVector<f64>> {
    let batch = FeatureGradientBatch::new(
        DenseMatrix::from_column_slice(f.len(), 1, f.as_slice()),
        DenseMatrix::from_column_slice(g.len(), 1, g.as_slice()),
        0,
        summary.meta().layer_id,
    )?;
    Ok(kernel_vectors(summary, &batch, variant)?
        .column(0)
        .into_owned())
}

/// How the ridge strength is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Fixed(f64),
    /// k-fold cross-validation over the buckets on a log grid scaled by `Tr(K̃)/M`.
    Auto {
        folds: usize,
    },
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::Auto { folds: 5 }
    }
}

/// Relative multipliers of `Tr(K̃)/M` tried by [`Alpha::Auto`].
pub const ALPHA_GRID: [f64; 9] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

#[derive(Debug, Clone)]
pub struct KrrModel {
    alpha: f64,
    coefficients: DenseMatrix,
    variant: Variant,
    config: SketchConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: DVector<f64>,
    pub label: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Solves `(K + αI) X = B` by Cholesky. For `α > 0`, a failed factorization
/// is retried with diagonal jitter `1e-12·Tr(K)`, growing tenfold, at most
/// three times. Returns the solution and the total diagonal shift used.
fn ridge_solve(k: &DenseMatrix, alpha: f64, b: &DenseMatrix) -> Result<(DenseMatrix, f64)> {
    let n = k.nrows();
    let trace = k.trace().max(f64::MIN_POSITIVE);
    let mut shift = alpha;
    let mut jitter = 1e-12 * trace;
    let retries = if alpha > 0.0 { 3 } else { 0 };
    for attempt in 0..=retries {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += shift;
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            let x = chol.solve(b);
            let residual = (&a * &x - b).norm();
            let scale = b.norm().max(f64::MIN_POSITIVE);
            if x.iter().all(|v| v.is_finite()) && residual <= 1e-8 * scale {
                return Ok((x, shift));
            }
        }
        if attempt < retries {
            shift = alpha + jitter;
            jitter *= 10.0;
        }
    }
    Err(Error::Singular(format!(
        "kernel system of size {n} is not positive definite with ridge {alpha:e}"
    )))
}

impl KrrModel {
    /// Fits `T̃ (K̃ + αI)⁻¹` on the sketched kernel of `variant`.
    pub fn fit(
        summary: &SketchSummary,
        targets: &SketchedTargets,
        alpha: Alpha,
        variant: Variant,
    ) -> Result<Self> {
        check_variant(variant)?;
        if targets.config() != summary.config() {
            return Err(Error::Incomparable(format!(
                "targets were sketched with {:?}, features with {:?}",
                targets.config(),
                summary.config()
            )));
        }
        if targets.samples() != summary.samples() {
            return Err(Error::dim(format!(
                "{} labels for {} sketched samples",
                targets.samples(),
                summary.samples()
            )));
        }
        let k = summary.kernel(variant, DEFAULT_REL_TOL)?.into_matrix();
        let alpha = match alpha {
            Alpha::Fixed(a) if a.is_finite() && a >= 0.0 => a,
            Alpha::Fixed(a) => {
                return Err(Error::InvalidInput(format!(
                    "ridge strength must be non-negative, got {a}"
                )))
            }
            Alpha::Auto { folds } => select_alpha(&k, targets.matrix(), folds)?,
        };
        Self::fit_kernel(&k, targets.matrix(), alpha, variant, *summary.config())
    }

    fn fit_kernel(
        k: &DenseMatrix,
        t: &DenseMatrix,
        alpha: f64,
        variant: Variant,
        config: SketchConfig,
    ) -> Result<Self> {
        let (x, _) = ridge_solve(k, alpha, &t.transpose())?;
        Ok(Self {
            alpha,
            coefficients: x.transpose(),
            variant,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `C × M`.
    pub fn coefficients(&self) -> &DenseMatrix {
        &self.coefficients
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn predict(&self, k_star: &DVector<f64>) -> Result<Prediction> {
        if k_star.len() != self.coefficients.ncols() {
            return Err(Error::dim(format!(
                "kernel vector has length {}, model expects {}",
                k_star.len(),
                self.coefficients.ncols()
            )));
        }
        let scores = &self.coefficients * k_star;
        let label = argmax(&scores);
        Ok(Prediction { scores, label })
    }

    /// Predicts every column of an `M × n` kernel block.
    pub fn predict_all(&self, k_block: &DenseMatrix) -> Result<Vec<Prediction>> {
        k_block
            .column_iter()
            .map(|c| self.predict(&c.into_owned()))
            .collect()
    }
}

/// Picks the ridge strength minimizing held-out squared error of the
/// sketched targets, treating each bucket as a pseudo-sample.
fn select_alpha(k: &DenseMatrix, t: &DenseMatrix, folds: usize) -> Result<f64> {
    let m = k.nrows();
    if folds < 2 || folds > m {
        return Err(Error::InvalidInput(format!(
            "cross-validation needs between 2 and {m} folds, got {folds}"
        )));
    }
    let unit = k.trace() / m as f64;
    if unit <= 0.0 {
        return Err(Error::Degenerate("sketched kernel has zero trace".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for rel in ALPHA_GRID {
        let alpha = rel * unit;
        let mut err = 0.0;
        for fold in 0..folds {
            let (train, held): (Vec<usize>, Vec<usize>) = (0..m).partition(|i| i % folds != fold);
            let k_tr = k.select_rows(&train).select_columns(&train);
            let k_cross = k.select_rows(&train).select_columns(&held);
            let t_tr = t.select_columns(&train);
            let t_held = t.select_columns(&held);
            let Ok((x, _)) = ridge_solve(&k_tr, alpha, &t_tr.transpose()) else {
                err = f64::INFINITY;
                break;
            };
            let pred = x.transpose() * k_cross;
            err += (pred - t_held).norm_squared();
        }
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((alpha, err));
        }
    }
    match best {
        Some((alpha, err)) if err.is_finite() => Ok(alpha),
        _ => Err(Error::Singular(
            "no ridge strength on the grid gave a solvable system".into(),
        )),
    }
}

/// Fraction of predictions matching `labels`.
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> f64 {
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.label == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Share of the most frequent label.
pub fn majority_baseline(labels: &[usize]) -> f64 {
    let Some(&max_label) = labels.iter().max() else {
        return 0.0;
    };
    let mut counts = vec![0usize; max_label + 1];
    for &y in labels {
        counts[y] += 1;
    }
    *counts.iter().max().unwrap() as f64 / labels.len() as f64
}

/// Dense reference solution `T (K + αI)⁻¹` on an explicit kernel.
pub fn dense_krr_coefficients(
    k: &DenseMatrix,
    onehot: &DenseMatrix,
    alpha: f64,
) -> Result<DenseMatrix> {
    linalg::ensure_finite(k, "kernel")?;
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += alpha;
    }
    let inv = a
        .try_inverse()
        .ok_or_else(|| Error::Singular("dense kernel system is singular".into()))?;
    Ok(onehot * inv)
}
