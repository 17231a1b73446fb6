//! Kernel representations built from per-sample features `f` and feature
//! gradients `g`.
//!
//! The combined representation is `K = K_f ∘ K_g`, which is the Gram matrix
//! of the rank-one maps `ψ(x) = g fᵀ` under the Frobenius inner product.
//! Three alternative combinations (sum, elementwise feature product, and the
//! geodesic midpoint) are provided for comparison.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};

/// A block of per-sample features and feature gradients at one layer.
/// Column `j` belongs to global sample index `first_index + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGradientBatch {
    features: DenseMatrix,
    gradients: DenseMatrix,
    first_index: u64,
    layer_id: u32,
}

impl FeatureGradientBatch {
    pub fn new(
        features: DenseMatrix,
        gradients: DenseMatrix,
        first_index: u64,
        layer_id: u32,
    ) -> Result<Self> {
        if features.ncols() != gradients.ncols() {
            return Err(Error::dim(format!(
                "batch has {} feature columns but {} gradient columns",
                features.ncols(),
                gradients.ncols()
            )));
        }
        // non-finite shard data is a data error, not a numerical failure
        for (m, what) in [(&features, "features"), (&gradients, "gradients")] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "batch {what} contain non-finite values"
                )));
            }
        }
        Ok(Self {
            features,
            gradients,
            first_index,
            layer_id,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn gradients(&self) -> &DenseMatrix {
        &self.gradients
    }

    pub fn first_index(&self) -> u64 {
        self.first_index
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn gradient_dim(&self) -> usize {
        self.gradients.nrows()
    }

    /// Columns `[start, start + len)` as a new batch with shifted indices.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::dim(format!(
                "slice {start}..{} out of range for batch of {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            features: self.features.columns(start, len).into_owned(),
            gradients: self.gradients.columns(start, len).into_owned(),
            first_index: self.first_index + start as u64,
            layer_id: self.layer_id,
        })
    }

    /// Concatenates contiguous batches of the same layer.
    pub fn concat(batches: &[FeatureGradientBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::InvalidInput("no batches to concatenate".into()))?;
        let total: usize = batches.iter().map(|b| b.len()).sum();
        let mut features = DenseMatrix::zeros(first.feature_dim(), total);
        let mut gradients = DenseMatrix::zeros(first.gradient_dim(), total);
        let mut offset = 0;
        let mut expected_index = first.first_index;
        for b in batches {
            if b.feature_dim() != first.feature_dim() || b.gradient_dim() != first.gradient_dim() {
                return Err(Error::dim(
                    "batches have different feature/gradient dimensions",
                ));
            }
            if b.first_index != expected_index {
                return Err(Error::InvalidInput(format!(
                    "batches are not contiguous: expected index {expected_index}, found {}",
                    b.first_index
                )));
            }
            features.columns_mut(offset, b.len()).copy_from(&b.features);
            gradients
                .columns_mut(offset, b.len())
                .copy_from(&b.gradients);
            offset += b.len();
            expected_index += b.len() as u64;
        }
        Self::new(features, gradients, first.first_index, first.layer_id)
    }
}

/// Which combination of feature and gradient information a kernel holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Feature,
    Gradient,
    Combined,
    Sum,
    Elementwise,
    Geodesic,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Feature,
        Variant::Gradient,
        Variant::Combined,
        Variant::Sum,
        Variant::Elementwise,
        Variant::Geodesic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Feature => "feature",
            Variant::Gradient => "gradient",
            Variant::Combined => "combined",
            Variant::Sum => "sum",
            Variant::Elementwise => "elementwise",
            Variant::Geodesic => "geodesic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant '{s}'")))
    }
}

/// A square PSD kernel matrix tagged with how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRepresentation {
    matrix: DenseMatrix,
    variant: Variant,
    n_source: u64,
    sketched: bool,
    layer_id: Option<u32>,
}

impl KernelRepresentation {
    /// Wraps a square matrix. Symmetry is checked to `1e-10` relative;
    /// positive semi-definiteness is the caller's contract (see [`Self::check_psd`]).
    pub fn new(
        matrix: DenseMatrix,
        variant: Variant,
        n_source: u64,
        sketched: bool,
    ) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::dim(format!(
                "kernel must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        linalg::ensure_finite(&matrix, "kernel")?;
        let asym = linalg::frobenius_norm(&(&matrix - matrix.transpose()));
        if asym > 1e-10 * linalg::frobenius_norm(&matrix) {
            return Err(Error::InvalidInput(format!(
                "kernel is not symmetric (asymmetry {asym:e})"
            )));
        }
        Ok(Self {
            matrix,
            variant,
            n_source,
            sketched,
            layer_id: None,
        })
    }

    pub fn with_layer(mut self, layer_id: u32) -> Self {
        self.layer_id = Some(layer_id);
        self
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_source(&self) -> u64 {
        self.n_source
    }

    pub fn is_sketched(&self) -> bool {
        self.sketched
    }

    pub fn layer_id(&self) -> Option<u32> {
        self.layer_id
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Min eigenvalue must be at least `-rel_tol · Tr(K)`.
    pub fn check_psd(&self, rel_tol: f64) -> Result<()> {
        let values = linalg::sym_eigenvalues(&self.matrix)?;
        let min = values.last().copied().unwrap_or(0.0);
        let tol = rel_tol * self.trace().abs();
        if min < -tol {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tol,
            });
        }
        Ok(())
    }

    fn derived(&self, matrix: DenseMatrix, variant: Variant, other: &KernelRepresentation) -> Self {
        Self {
            matrix,
            variant,
            n_source: self.n_source,
            sketched: self.sketched || other.sketched,
            layer_id: self.layer_id.or(other.layer_id),
        }
    }
}

fn same_size(a: &KernelRepresentation, b: &KernelRepresentation, op: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::dim(format!(
            "{op}: kernels are {0}x{0} and {1}x{1}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

/// `Φᵀ Φ` for a `d × n` feature map.
pub fn gram(phi: &DenseMatrix, variant: Variant) -> Result<KernelRepresentation> {
    linalg::ensure_finite(phi, "gram")?;
    let k = linalg::symmetrize(&(phi.transpose() * phi));
    KernelRepresentation::new(k, variant, phi.ncols() as u64, false)
}

/// `K_f ∘ K_g`.
pub fn combine_hadamard(
    kf: &KernelRepresentation,
    kg: &KernelRepresentation,
) -> Result<KernelRepresentation> {
    same_size(kf, kg, "combine_hadamard")?;
    let m = linalg::hadamard(kf.matrix(), kg.matrix())?;
    Ok(kf.derived(m, Variant::Combined, kg))
}

/// `K_f + K_g`.
pub fn combine_sum(
    kf: &KernelRepresentation,
    kg: &KernelRepresentation,
) -> Result<KernelRepresentation> {
    same_size(kf, kg, "combine_sum")?;
    Ok(kf.derived(kf.matrix() + kg.matrix(), Variant::Sum, kg))
}

/// Gram of the entrywise product `Φ_f ∘ Φ_g`; only defined when `d_f = d_g`.
pub fn combine_elementwise(
    features: &DenseMatrix,
    gradients: &DenseMatrix,
) -> Result<KernelRepresentation> {
    if features.shape() != gradients.shape() {
        return Err(Error::dim(format!(
            "elementwise combination needs equal shapes, got {}x{} and {}x{}",
            features.nrows(),
            features.ncols(),
            gradients.nrows(),
            gradients.ncols()
        )));
    }
    gram(&features.component_mul(gradients), Variant::Elementwise)
}

/// Geodesic midpoint `(½I + ½T) K_f (½I + ½T)` with
/// `T = K_f^{-1/2} (K_f^{1/2} K_g K_f^{1/2})^{1/2} K_f^{-1/2}`.
/// Singular `K_f` is handled with pseudo-inverse roots.
pub fn combine_geodesic(
    kf: &KernelRepresentation,
    kg: &KernelRepresentation,
    rel_tol: f64,
) -> Result<KernelRepresentation> {
    same_size(kf, kg, "combine_geodesic")?;
    let root = linalg::psd_sqrt(kf.matrix(), rel_tol)?;
    let inv_root = linalg::psd_pinv_sqrt(kf.matrix(), rel_tol)?;
    linalg::check_psd(kg.matrix(), rel_tol)?;
    let inner = linalg::symmetrize(&(&root * kg.matrix() * &root));
    let inner_root = linalg::psd_sqrt(&inner, rel_tol)?;
    let t = &inv_root * inner_root * &inv_root;
    let n = kf.size();
    let a = (DenseMatrix::identity(n, n) + t) * 0.5;
    let k = linalg::symmetrize(&(&a * kf.matrix() * a.transpose()));
    Ok(kf.derived(k, Variant::Geodesic, kg))
}

/// `ψ = g fᵀ`, a `d_g × d_f` matrix.
pub fn psi_map(f: &DVector<f64>, g: &DVector<f64>) -> DenseMatrix {
    g * f.transpose()
}

/// Vectorized `ψ` maps of every sample as columns of a `(d_f·d_g) × n`
/// matrix (column-major vectorization of each `g_j f_jᵀ`).
pub fn psi_columns(features: &DenseMatrix, gradients: &DenseMatrix) -> Result<DenseMatrix> {
    if features.ncols() != gradients.ncols() {
        return Err(Error::dim(
            "features and gradients have different sample counts",
        ));
    }
    let (df, dg, n) = (features.nrows(), gradients.nrows(), features.ncols());
    let mut out = DenseMatrix::zeros(df * dg, n);
    for j in 0..n {
        let mut col = out.column_mut(j);
        for b in 0..df {
            let fb = features[(b, j)];
            for a in 0..dg {
                col[a + dg * b] = gradients[(a, j)] * fb;
            }
        }
    }
    Ok(out)
}

/// Builds a kernel of the requested variant from explicit feature and
/// gradient maps (`d × n` each).
pub fn kernel_from_maps(
    features: &DenseMatrix,
    gradients: &DenseMatrix,
    variant: Variant,
    rel_tol: f64,
) -> Result<KernelRepresentation> {
    match variant {
        Variant::Feature => gram(features, Variant::Feature),
        Variant::Gradient => gram(gradients, Variant::Gradient),
        Variant::Elementwise => combine_elementwise(features, gradients),
        other => {
            let kf = gram(features, Variant::Feature)?;
            let kg = gram(gradients, Variant::Gradient)?;
            combine(&kf, &kg, other, rel_tol)
        }
    }
}

/// Combines a feature kernel and a gradient kernel. `Elementwise` needs the
/// explicit maps and is rejected here.
pub fn combine(
    kf: &KernelRepresentation,
    kg: &KernelRepresentation,
    variant: Variant,
    rel_tol: f64,
) -> Result<KernelRepresentation> {
    match variant {
        Variant::Feature => Ok(kf.clone()),
        Variant::Gradient => Ok(kg.clone()),
        Variant::Combined => combine_hadamard(kf, kg),
        Variant::Sum => combine_sum(kf, kg),
        Variant::Geodesic => combine_geodesic(kf, kg, rel_tol),
        Variant::Elementwise => Err(Error::InsufficientAccumulators(
            "the elementwise variant needs explicit feature and gradient maps".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DEFAULT_REL_TOL;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn min_eig_ok(k: &KernelRepresentation) -> bool {
        k.check_psd(1e-10).is_ok()
    }

    #[test]
    fn gram_examples() {
        let k = gram(&DenseMatrix::identity(3, 3), Variant::Feature).unwrap();
        assert_eq!(k.matrix(), &DenseMatrix::identity(3, 3));
        let f = DenseMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let k = gram(&f, Variant::Feature).unwrap();
        assert_eq!(k.matrix()[(0, 0)], 9.0);
        assert_eq!(k.n_source(), 1);
        for seed in 0..10 {
            assert!(min_eig_ok(
                &gram(&random(4, 12, seed), Variant::Feature).unwrap()
            ));
        }
    }

    #[test]
    fn hadamard_with_neutral_gradient_kernel() {
        let kf = gram(&random(3, 5, 1), Variant::Feature).unwrap();
        let ones = KernelRepresentation::new(
            DenseMatrix::from_element(5, 5, 1.0),
            Variant::Gradient,
            5,
            false,
        )
        .unwrap();
        let k = combine_hadamard(&kf, &ones).unwrap();
        assert_eq!(k.matrix(), kf.matrix());
        assert_eq!(k.variant(), Variant::Combined);
    }

    #[test]
    fn hadamard_matches_flattened_psi_gram() {
        let f = random(3, 4, 2);
        let g = random(5, 4, 3);
        let k = kernel_from_maps(&f, &g, Variant::Combined, DEFAULT_REL_TOL).unwrap();
        // brute-force oracle: Frobenius inner products of explicit outer products
        for i in 0..4 {
            for j in 0..4 {
                let pi = psi_map(&f.column(i).into_owned(), &g.column(i).into_owned());
                let pj = psi_map(&f.column(j).into_owned(), &g.column(j).into_owned());
                let expected = linalg::frobenius_inner(&pi, &pj).unwrap();
                assert_abs_diff_eq!(
                    k.matrix()[(i, j)],
                    expected,
                    epsilon = 1e-12 * expected.abs().max(1.0)
                );
            }
            let fi = f.column(i).norm_squared();
            let gi = g.column(i).norm_squared();
            assert_abs_diff_eq!(k.matrix()[(i, i)], fi * gi, epsilon = 1e-12 * fi * gi);
        }
        let psi = psi_columns(&f, &g).unwrap();
        let via_cols = gram(&psi, Variant::Combined).unwrap();
        assert_abs_diff_eq!(via_cols.matrix(), k.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn psi_map_examples() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let p = psi_map(&e1, &e2);
        assert_eq!(p[(1, 0)], 1.0);
        assert_eq!(p.iter().filter(|&&v| v != 0.0).count(), 1);
        let f = DVector::from_vec(vec![1.0, -2.0]);
        let g = DVector::from_vec(vec![3.0, 0.5, 4.0]);
        assert_abs_diff_eq!(
            linalg::frobenius_norm(&psi_map(&f, &g)),
            f.norm() * g.norm(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sum_examples() {
        let kf = gram(&random(3, 6, 4), Variant::Feature).unwrap();
        let zero = KernelRepresentation::new(DenseMatrix::zeros(6, 6), Variant::Gradient, 6, false)
            .unwrap();
        assert_eq!(combine_sum(&kf, &zero).unwrap().matrix(), kf.matrix());
        let i = KernelRepresentation::new(DenseMatrix::identity(3, 3), Variant::Feature, 3, false)
            .unwrap();
        assert_eq!(
            combine_sum(&i, &i).unwrap().matrix(),
            &(DenseMatrix::identity(3, 3) * 2.0)
        );
        let kg = gram(&random(2, 6, 5), Variant::Gradient).unwrap();
        assert!(min_eig_ok(&combine_sum(&kf, &kg).unwrap()));
    }

    #[test]
    fn elementwise_examples() {
        let f = random(4, 6, 6);
        let ones = DenseMatrix::from_element(4, 6, 1.0);
        let k = combine_elementwise(&f, &ones).unwrap();
        assert_abs_diff_eq!(
            k.matrix(),
            gram(&f, Variant::Feature).unwrap().matrix(),
            epsilon = 1e-12
        );

        let g = random(4, 1, 7);
        let k = combine_elementwise(&f.columns(0, 1).into_owned(), &g).unwrap();
        let fg = f.column(0).component_mul(&g.column(0));
        assert_abs_diff_eq!(k.matrix()[(0, 0)], fg.norm_squared(), epsilon = 1e-12);

        let g = random(4, 4, 8);
        let f4 = f.columns(0, 4).into_owned();
        let k = combine_elementwise(&f4, &g).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut expected = 0.0;
                for r in 0..4 {
                    expected += f4[(r, i)] * g[(r, i)] * f4[(r, j)] * g[(r, j)];
                }
                assert_abs_diff_eq!(k.matrix()[(i, j)], expected, epsilon = 1e-12);
            }
        }

        assert!(matches!(
            combine_elementwise(&random(3, 4, 1), &random(5, 4, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn geodesic_fixed_points() {
        let kf = gram(&random(6, 4, 9), Variant::Feature).unwrap();
        let k = combine_geodesic(&kf, &kf, DEFAULT_REL_TOL).unwrap();
        assert_abs_diff_eq!(k.matrix(), kf.matrix(), epsilon = 1e-8 * kf.trace());

        let i = KernelRepresentation::new(DenseMatrix::identity(3, 3), Variant::Feature, 3, false)
            .unwrap();
        let k = combine_geodesic(&i, &i, DEFAULT_REL_TOL).unwrap();
        assert_abs_diff_eq!(k.matrix(), &DenseMatrix::identity(3, 3), epsilon = 1e-12);
    }

    /// Oracle: compose the geodesic formula from explicit eigendecompositions
    /// of 3x3 full-rank matrices.
    #[test]
    fn geodesic_matches_eigen_composition() {
        fn mat_pow(k: &DenseMatrix, p: f64) -> DenseMatrix {
            let eig = nalgebra::SymmetricEigen::new(k.clone());
            let d = DenseMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.powf(p)));
            &eig.eigenvectors * d * eig.eigenvectors.transpose()
        }
        for seed in 0..5 {
            let kf = gram(&random(5, 3, 10 + seed), Variant::Feature).unwrap();
            let kg = gram(&random(4, 3, 20 + seed), Variant::Gradient).unwrap();
            let a = kf.matrix();
            let t = mat_pow(a, -0.5)
                * mat_pow(&(mat_pow(a, 0.5) * kg.matrix() * mat_pow(a, 0.5)), 0.5)
                * mat_pow(a, -0.5);
            let half = (DenseMatrix::identity(3, 3) + t) * 0.5;
            let expected = &half * a * &half;
            let k = combine_geodesic(&kf, &kg, DEFAULT_REL_TOL).unwrap();
            assert_abs_diff_eq!(k.matrix(), &expected, epsilon = 1e-8 * expected.norm());
            assert!(min_eig_ok(&k));
        }
    }

    #[test]
    fn geodesic_handles_singular_feature_kernel() {
        let kf = gram(&random(2, 6, 30), Variant::Feature).unwrap();
        let kg = gram(&random(3, 6, 31), Variant::Gradient).unwrap();
        let k = combine_geodesic(&kf, &kg, 1e-9).unwrap();
        assert!(k.matrix().iter().all(|v| v.is_finite()));
        assert!(min_eig_ok(&k));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn batch_slicing_and_concat() {
        let b = FeatureGradientBatch::new(random(3, 10, 1), random(2, 10, 2), 5, 1).unwrap();
        let parts = vec![b.slice(0, 4).unwrap(), b.slice(4, 6).unwrap()];
        assert_eq!(parts[1].first_index(), 9);
        assert_eq!(FeatureGradientBatch::concat(&parts).unwrap(), b);
        assert!(FeatureGradientBatch::new(random(3, 4, 1), random(2, 5, 2), 0, 0).is_err());
    }
}
