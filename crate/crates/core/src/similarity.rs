//! CKA and NBS similarity indices.
//!
//! ```text
//! ρ_CKA(K1, K2) = ⟨K1, K2⟩_F / (‖K1‖_F ‖K2‖_F)
//! ρ_NBS(K1, K2) = Tr((K1^{1/2} K2 K1^{1/2})^{1/2}) / √(Tr K1 · Tr K2)
//! ```
//!
//! For linear kernels `K = ΨᵀΨ` both have feature-space forms that avoid
//! the `n × n` kernel entirely; [`cka_from_features`] and
//! [`nbs_from_features`] implement those.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DEFAULT_REL_TOL};
use crate::representation::{self, FeatureGradientBatch, KernelRepresentation, Variant};
use crate::sketch::{SketchConfig, SketchState, SketchSummary};

/// Raw scores above `1 + SCORE_SLACK` (or below `-SCORE_SLACK`) are bugs,
/// not roundoff.
pub const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Index {
    Cka,
    Nbs,
}

impl Index {
    pub fn as_str(&self) -> &'static str {
        match self {
            Index::Cka => "cka",
            Index::Nbs => "nbs",
        }
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Index {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cka" => Ok(Index::Cka),
            "nbs" => Ok(Index::Nbs),
            _ => Err(Error::InvalidInput(format!(
                "unknown index '{s}' (expected cka or nbs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub index: Index,
    pub sketched: bool,
    pub centering: bool,
    pub variants: Option<(Variant, Variant)>,
    /// Set when the two kernels were sketched with different hash functions
    /// or sample counts; such scores carry no approximation guarantee.
    pub heuristic: bool,
}

impl SimilarityScore {
    fn new(raw: f64, index: Index) -> Result<Self> {
        Ok(Self {
            value: clamp_score(raw)?,
            index,
            sketched: false,
            centering: false,
            variants: None,
            heuristic: false,
        })
    }

    fn for_kernels(
        raw: f64,
        index: Index,
        k1: &KernelRepresentation,
        k2: &KernelRepresentation,
        centering: bool,
    ) -> Result<Self> {
        let mut s = Self::new(raw, index)?;
        s.sketched = k1.is_sketched() || k2.is_sketched();
        s.centering = centering;
        s.variants = Some((k1.variant(), k2.variant()));
        Ok(s)
    }
}

fn clamp_score(raw: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::NonFinite(format!("similarity score is {raw}")));
    }
    if !(-SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&raw) {
        return Err(Error::ScoreOutOfRange(raw));
    }
    Ok(raw.clamp(0.0, 1.0))
}

fn check_pair(k1: &DenseMatrix, k2: &DenseMatrix) -> Result<()> {
    if k1.shape() != k2.shape() || !k1.is_square() {
        return Err(Error::dim(format!(
            "kernels are {}x{} and {}x{}",
            k1.nrows(),
            k1.ncols(),
            k2.nrows(),
            k2.ncols()
        )));
    }
    Ok(())
}

/// `H K H` with `H = I − 11ᵀ/n`.
pub fn double_center(k: &DenseMatrix) -> DenseMatrix {
    let n = k.nrows() as f64;
    let row_means: Vec<f64> = k.row_iter().map(|r| r.sum() / n).collect();
    let col_means: Vec<f64> = k.column_iter().map(|c| c.sum() / n).collect();
    let grand = row_means.iter().sum::<f64>() / n;
    DenseMatrix::from_fn(k.nrows(), k.ncols(), |i, j| {
        k[(i, j)] - row_means[i] - col_means[j] + grand
    })
}

/// Unclamped CKA value.
pub fn cka_value(k1: &DenseMatrix, k2: &DenseMatrix) -> Result<f64> {
    check_pair(k1, k2)?;
    let n1 = linalg::frobenius_norm(k1);
    let n2 = linalg::frobenius_norm(k2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate(
            "CKA of a kernel with zero Frobenius norm".into(),
        ));
    }
    Ok(linalg::frobenius_inner(k1, k2)? / (n1 * n2))
}

/// Unclamped NBS value.
pub fn nbs_value(k1: &DenseMatrix, k2: &DenseMatrix, rel_tol: f64) -> Result<f64> {
    check_pair(k1, k2)?;
    let t1 = k1.trace();
    let t2 = k2.trace();
    if t1.is_nan() || t2.is_nan() || t1 <= 0.0 || t2 <= 0.0 {
        return Err(Error::Degenerate(
            "NBS of a kernel with nonpositive trace".into(),
        ));
    }
    linalg::check_psd(k2, rel_tol)?;
    let root = linalg::psd_sqrt(k1, rel_tol)?;
    let inner = linalg::symmetrize(&(&root * k2 * &root));
    let fidelity = linalg::trace_sqrt(&inner, rel_tol)?;
    Ok(fidelity / (t1 * t2).sqrt())
}

fn maybe_center(k: &KernelRepresentation, centering: bool) -> DenseMatrix {
    if centering {
        double_center(k.matrix())
    } else {
        k.matrix().clone()
    }
}

pub fn cka(
    k1: &KernelRepresentation,
    k2: &KernelRepresentation,
    centering: bool,
) -> Result<SimilarityScore> {
    let raw = cka_value(&maybe_center(k1, centering), &maybe_center(k2, centering))?;
    SimilarityScore::for_kernels(raw, Index::Cka, k1, k2, centering)
}

pub fn nbs(
    k1: &KernelRepresentation,
    k2: &KernelRepresentation,
    centering: bool,
) -> Result<SimilarityScore> {
    let raw = nbs_value(
        &maybe_center(k1, centering),
        &maybe_center(k2, centering),
        DEFAULT_REL_TOL,
    )?;
    SimilarityScore::for_kernels(raw, Index::Nbs, k1, k2, centering)
}

pub fn score(
    k1: &KernelRepresentation,
    k2: &KernelRepresentation,
    index: Index,
    centering: bool,
) -> Result<SimilarityScore> {
    match index {
        Index::Cka => cka(k1, k2, centering),
        Index::Nbs => nbs(k1, k2, centering),
    }
}

fn check_feature_pair(psi1: &DenseMatrix, psi2: &DenseMatrix) -> Result<()> {
    if psi1.ncols() != psi2.ncols() {
        return Err(Error::dim(format!(
            "feature maps cover {} and {} samples",
            psi1.ncols(),
            psi2.ncols()
        )));
    }
    Ok(())
}

/// Unclamped CKA of `Ψ1ᵀΨ1` and `Ψ2ᵀΨ2` computed in feature space.
pub fn cka_features_value(psi1: &DenseMatrix, psi2: &DenseMatrix) -> Result<f64> {
    check_feature_pair(psi1, psi2)?;
    let cross = psi1 * psi2.transpose();
    let n1 = linalg::frobenius_norm(&(psi1 * psi1.transpose()));
    let n2 = linalg::frobenius_norm(&(psi2 * psi2.transpose()));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate("CKA of a zero feature map".into()));
    }
    Ok(cross.norm_squared() / (n1 * n2))
}

/// Unclamped NBS of `Ψ1ᵀΨ1` and `Ψ2ᵀΨ2`: nuclear norm of `Ψ1Ψ2ᵀ` over
/// `‖Ψ1‖_F ‖Ψ2‖_F`.
pub fn nbs_features_value(psi1: &DenseMatrix, psi2: &DenseMatrix) -> Result<f64> {
    check_feature_pair(psi1, psi2)?;
    let n1 = linalg::frobenius_norm(psi1);
    let n2 = linalg::frobenius_norm(psi2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate("NBS of a zero feature map".into()));
    }
    let nuclear = linalg::singular_values(&(psi1 * psi2.transpose()))?.sum();
    Ok(nuclear / (n1 * n2))
}

/// CKA from explicit `d × n` feature maps.
pub fn cka_from_features(psi1: &DenseMatrix, psi2: &DenseMatrix) -> Result<SimilarityScore> {
    SimilarityScore::new(cka_features_value(psi1, psi2)?, Index::Cka)
}

/// NBS from explicit `d × n` feature maps.
pub fn nbs_from_features(psi1: &DenseMatrix, psi2: &DenseMatrix) -> Result<SimilarityScore> {
    SimilarityScore::new(nbs_features_value(psi1, psi2)?, Index::Nbs)
}

/// Both sides of `ρ_CKA(K1, K2) ≤ ρ_NBS(K1², K2²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn check_alt_inequality(k1: &DenseMatrix, k2: &DenseMatrix) -> Result<AltCheck> {
    let lhs = cka_value(k1, k2)?;
    let sq1 = linalg::symmetrize(&(k1 * k1));
    let sq2 = linalg::symmetrize(&(k2 * k2));
    let rhs = nbs_value(&sq1, &sq2, DEFAULT_REL_TOL)?;
    Ok(AltCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10,
    })
}

/// Outcome of sketching two feature maps with one shared sketch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTrialResult {
    pub rho_exact: f64,
    pub rho_sketched: f64,
    /// `|ρ_sketched − ρ_exact| / ρ_exact`.
    pub relative_error: f64,
    /// Relative change of `‖Ψ1 Ψ2ᵀ‖_F` under the sketch.
    pub eps_cross: f64,
    /// Same for `‖Ψ1 Ψ1ᵀ‖_F`.
    pub eps_first: f64,
    /// Same for `‖Ψ2 Ψ2ᵀ‖_F`.
    pub eps_second: f64,
    pub buckets: usize,
    pub seed: u64,
}

impl BoundTrialResult {
    /// Smallest ε for which all three norm deviations are within ε.
    pub fn epsilon(&self) -> f64 {
        self.eps_cross.max(self.eps_first).max(self.eps_second)
    }

    /// `4ε/(1−ε)² · ρ_exact`, infinite for `ε ≥ 1`.
    pub fn bound(&self, eps: f64) -> f64 {
        if eps >= 1.0 {
            f64::INFINITY
        } else {
            4.0 * eps / ((1.0 - eps) * (1.0 - eps)) * self.rho_exact
        }
    }

    pub fn within_bound(&self, eps: f64) -> bool {
        (self.rho_sketched - self.rho_exact).abs() <= self.bound(eps)
    }
}

fn relative_change(sketched: f64, exact: f64) -> f64 {
    (sketched - exact).abs() / exact
}

/// Sketches `Ψ1` (`d1 × n`) and `Ψ2` (`d2 × n`) with one shared sketch and
/// compares sketched and exact CKA.
pub fn sketched_cka_trial(
    psi1: &DenseMatrix,
    psi2: &DenseMatrix,
    config: &SketchConfig,
) -> Result<BoundTrialResult> {
    check_feature_pair(psi1, psi2)?;
    let batch = FeatureGradientBatch::new(psi1.clone(), psi2.clone(), 0, 0)?;
    let mut state = SketchState::new(*config, psi1.nrows(), psi2.nrows(), false)?;
    state.absorb(&batch)?;
    let s1 = state.feature_accumulator();
    let s2 = state.gradient_accumulator();

    let exact = [
        linalg::frobenius_norm(&(psi1 * psi2.transpose())),
        linalg::frobenius_norm(&(psi1 * psi1.transpose())),
        linalg::frobenius_norm(&(psi2 * psi2.transpose())),
    ];
    if exact.contains(&0.0) {
        return Err(Error::Degenerate(
            "sketched CKA trial on a zero or orthogonal pair".into(),
        ));
    }
    let sketched = [
        linalg::frobenius_norm(&(s1 * s2.transpose())),
        linalg::frobenius_norm(&(s1 * s1.transpose())),
        linalg::frobenius_norm(&(s2 * s2.transpose())),
    ];
    if sketched[1] == 0.0 || sketched[2] == 0.0 {
        return Err(Error::Degenerate("sketch annihilated a feature map".into()));
    }
    let rho_exact = exact[0] * exact[0] / (exact[1] * exact[2]);
    let rho_sketched = sketched[0] * sketched[0] / (sketched[1] * sketched[2]);
    Ok(BoundTrialResult {
        rho_exact,
        rho_sketched,
        relative_error: relative_change(rho_sketched, rho_exact),
        eps_cross: relative_change(sketched[0], exact[0]),
        eps_first: relative_change(sketched[1], exact[1]),
        eps_second: relative_change(sketched[2], exact[2]),
        buckets: config.buckets(),
        seed: config.seed(),
    })
}

/// Feature-space map whose Gram matrix is the summary kernel of `variant`,
/// if one exists and is cheaper than the `M × M` kernel.
fn summary_feature_map(s: &SketchSummary, variant: Variant) -> Result<Option<DenseMatrix>> {
    let m = s.buckets();
    Ok(match variant {
        Variant::Feature if s.feature_dim() < m => Some(s.feature_sketch().clone()),
        Variant::Gradient if s.gradient_dim() < m => Some(s.gradient_sketch().clone()),
        Variant::Combined if s.feature_dim() * s.gradient_dim() < m => Some(
            representation::psi_columns(s.feature_sketch(), s.gradient_sketch())?,
        ),
        _ => None,
    })
}

/// Compares two sketch summaries with the same bucket count.
pub fn compare_summaries(
    a: &SketchSummary,
    b: &SketchSummary,
    variant: Variant,
    index: Index,
    centering: bool,
) -> Result<SimilarityScore> {
    if a.buckets() != b.buckets() {
        return Err(Error::Incomparable(format!(
            "bucket counts differ: {} vs {}",
            a.buckets(),
            b.buckets()
        )));
    }
    let heuristic = a.config() != b.config() || a.samples() != b.samples();
    let mut out = if centering {
        None
    } else {
        match (
            summary_feature_map(a, variant)?,
            summary_feature_map(b, variant)?,
        ) {
            (Some(pa), Some(pb)) => {
                let raw = match index {
                    Index::Cka => cka_features_value(&pa, &pb)?,
                    Index::Nbs => nbs_features_value(&pa, &pb)?,
                };
                let mut s = SimilarityScore::new(raw, index)?;
                s.sketched = true;
                s.variants = Some((variant, variant));
                Some(s)
            }
            _ => None,
        }
    };
    if out.is_none() {
        let ka = a.kernel(variant, DEFAULT_REL_TOL)?;
        let kb = b.kernel(variant, DEFAULT_REL_TOL)?;
        out = Some(score(&ka, &kb, index, centering)?);
    }
    let mut s = out.expect("score computed on one of the two paths");
    s.heuristic = heuristic;
    Ok(s)
}
