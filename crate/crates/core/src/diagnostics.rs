//! Kernel-mean-embedding norm and the quantities it is compared against,
//! the Fisher–Rao norm, and the Task2Vec baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DEFAULT_REL_TOL};
use crate::representation::{KernelRepresentation, Variant};
use crate::sketch::{Hashing, SketchSummary};
use crate::testbed::{softmax_columns, Dataset, MlpNetwork};

/// `‖μ_p‖ = ‖Σ_j g_j f_jᵀ‖_F / N`.
pub fn kme_norm(mpsi: &DenseMatrix, samples: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::EmptySketch);
    }
    linalg::ensure_finite(mpsi, "mean-embedding accumulator")?;
    Ok(linalg::frobenius_norm(mpsi) / samples as f64)
}

/// `‖μ_p‖` recovered from an exact kernel as the square root of its mean entry.
pub fn kme_norm_from_kernel(k: &DenseMatrix) -> Result<f64> {
    if k.is_empty() {
        return Err(Error::EmptySketch);
    }
    let mean = k.sum() / k.len() as f64;
    Ok(mean.max(0.0).sqrt())
}

/// Per-layer embedding-norm diagnostics. All quantities are unscaled;
/// `num_layers` is carried so callers can apply any depth scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDiagnostics {
    pub layer_id: u32,
    pub samples: u64,
    pub num_layers: Option<u32>,
    pub mu_norm: f64,
    /// `‖K‖_F / N²`
    pub k_fro_scaled: f64,
    /// `√Tr(K) / N`
    pub tr_sqrt_scaled: f64,
    pub ratio_cka: f64,
    pub ratio_nbs: f64,
    /// `ln(ratio_cka)`; `None` when the ratio is zero.
    pub log_scalar: Option<f64>,
    /// Whether `‖K‖_F` was estimated from the sketched kernel.
    pub sketched: bool,
}

impl EmbeddingDiagnostics {
    pub fn with_num_layers(mut self, layers: u32) -> Self {
        self.num_layers = Some(layers);
        self
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Diagnostics for one summary. `‖K‖_F` comes from `exact` when given and
/// from `K̃_f ∘ K̃_g` otherwise; `Tr(K)` always comes from the exact
/// `Σ‖f‖²‖g‖²` accumulator.
///
/// The sketched Frobenius norm is biased upward: `K̃_f ∘ K̃_g` is not a
/// sketch of `K` but of a kernel that also contains cross terms between
/// samples sharing a bucket, so treat sketched `k_fro_scaled` as an
/// ordering signal rather than an estimate.
pub fn diagnostics_for(
    summary: &SketchSummary,
    exact: Option<&KernelRepresentation>,
) -> Result<EmbeddingDiagnostics> {
    let n = summary.samples();
    if let Some(k) = exact {
        if k.size() as u64 != n {
            return Err(Error::dim(format!(
                "exact kernel is {0}×{0} but the summary holds {n} samples",
                k.size()
            )));
        }
    }
    let mu_norm = match (summary.mpsi(), exact) {
        (Some(m), _) => kme_norm(m, n)?,
        (None, Some(k)) => kme_norm_from_kernel(k.matrix())?,
        (None, None) => {
            return Err(Error::InsufficientAccumulators(
                "the mean embedding needs a tracked Σ g fᵀ accumulator or an exact kernel".into(),
            ))
        }
    };
    let (k_fro, sketched) = match exact {
        Some(k) => (linalg::frobenius_norm(k.matrix()), false),
        None => {
            let k = summary.kernel(Variant::Combined, DEFAULT_REL_TOL)?;
            (
                linalg::frobenius_norm(k.matrix()),
                summary.config().hashing() != Hashing::Identity,
            )
        }
    };
    let nf = n as f64;
    let k_fro_scaled = k_fro / (nf * nf);
    let tr_sqrt_scaled = summary.trace_fg().max(0.0).sqrt() / nf;
    let ratio_cka = ratio(mu_norm, k_fro_scaled);
    let ratio_nbs = ratio(mu_norm, tr_sqrt_scaled);
    if !(ratio_cka.is_finite() && ratio_nbs.is_finite()) {
        return Err(Error::Degenerate(
            "kernel norm is zero while the mean embedding is not".into(),
        ));
    }
    Ok(EmbeddingDiagnostics {
        layer_id: summary.meta().layer_id,
        samples: n,
        num_layers: None,
        mu_norm,
        k_fro_scaled,
        tr_sqrt_scaled,
        ratio_cka,
        ratio_nbs,
        log_scalar: (ratio_cka > 0.0).then(|| ratio_cka.ln()),
        sketched,
    })
}

fn check_fits(network: &MlpNetwork, data: &Dataset) -> Result<()> {
    if data.input_dim() != network.input_dim() || data.classes() != network.num_classes() {
        return Err(Error::dim(format!(
            "dataset ({} inputs, {} classes) does not fit network {:?}",
            data.input_dim(),
            data.classes(),
            network.dims()
        )));
    }
    Ok(())
}

/// `E_x E_{y~q} ⟨f_l, ∇_{f_l} ℓ(x, y)⟩²` for the post-activation output of `layer`.
fn fr_moment(network: &MlpNetwork, data: &Dataset, beta: f64, layer: usize) -> Result<f64> {
    network.check_layer(layer)?;
    check_fits(network, data)?;
    if !(beta.is_finite() && beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "smoothing beta must lie in (0, 1], got {beta}"
        )));
    }
    let pass = network.forward(data.inputs())?;
    let p = softmax_columns(pass.logits(), 1.0);
    let q = softmax_columns(pass.logits(), beta);
    let f = &pass.outputs[layer];
    let mut total = 0.0;
    for y in 0..network.num_classes() {
        let mut d = p.clone();
        d.row_mut(y).add_scalar_mut(-1.0);
        let g = if layer == network.num_layers() {
            d
        } else {
            network.backward(&pass, &d).outputs[layer].clone()
        };
        for j in 0..data.len() {
            let inner = f.column(j).dot(&g.column(j));
            total += q[(y, j)] * inner * inner;
        }
    }
    Ok(total / data.len() as f64)
}

/// Fisher–Rao norm `(L+1) · √(E_x E_{y~q} ⟨z, ∇_z ℓ(z, y)⟩²)` with `z` the
/// logits and `L` the number of weight layers.
pub fn fr_norm(network: &MlpNetwork, data: &Dataset, beta: f64) -> Result<f64> {
    fr_norm_at_layer(network, data, beta, network.num_layers())
}

/// Same as [`fr_norm`] with the post-activation output of `layer` in place of the logits.
pub fn fr_norm_at_layer(
    network: &MlpNetwork,
    data: &Dataset,
    beta: f64,
    layer: usize,
) -> Result<f64> {
    let scale = (network.num_layers() + 1) as f64;
    Ok(scale * fr_moment(network, data, beta, layer)?.sqrt())
}

/// `|a − b| / √(ab)`.
pub fn fr_distance(a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
        return Err(Error::InvalidInput(format!(
            "Fisher–Rao norms must be positive, got {a} and {b}"
        )));
    }
    Ok((a - b).abs() / (a * b).sqrt())
}

/// Diagonal Fisher information of a fixed probe network on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task2VecEmbedding {
    pub values: Vec<f64>,
    /// Fingerprint of the probe's parameters.
    pub probe_id: u64,
}

/// `∇_θ log p_θ(y | x)` flattened in the order of [`MlpNetwork::flat_parameters`].
pub fn log_likelihood_gradient(network: &MlpNetwork, x: &[f64], y: usize) -> Result<Vec<f64>> {
    if y >= network.num_classes() {
        return Err(Error::InvalidInput(format!("label {y} out of range")));
    }
    let pass = network.forward(&DenseMatrix::from_column_slice(x.len(), 1, x))?;
    let mut d = -softmax_columns(pass.logits(), 1.0);
    d[(y, 0)] += 1.0;
    let back = network.backward(&pass, &d);
    let mut out = Vec::with_capacity(network.num_parameters());
    for (w, b) in back.weights.iter().zip(&back.biases) {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    Ok(out)
}

/// `v_i = E_x Σ_y p(y|x) (∂_{θ_i} log p(y|x))²`, summing over classes exactly.
pub fn task2vec(probe: &MlpNetwork, data: &Dataset) -> Result<Task2VecEmbedding> {
    check_fits(probe, data)?;
    let pass = probe.forward(data.inputs())?;
    let p = softmax_columns(pass.logits(), 1.0);
    let last = probe.num_layers();
    let mut v_w: Vec<DenseMatrix> = probe
        .weights()
        .iter()
        .map(|w| DenseMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut v_b: Vec<DenseMatrix> = probe
        .biases()
        .iter()
        .map(|b| DenseMatrix::zeros(b.len(), 1))
        .collect();
    let squared_inputs: Vec<DenseMatrix> = pass.outputs[..last]
        .iter()
        .map(|a| a.map(|v| v * v))
        .collect();
    for y in 0..probe.num_classes() {
        let mut d = -&p;
        d.row_mut(y).add_scalar_mut(1.0);
        let back = probe.backward(&pass, &d);
        for k in 1..=last {
            // per-sample deltas at the pre-activation of layer k
            let delta = if k == last {
                back.outputs[k].clone()
            } else {
                back.outputs[k].zip_map(&pass.preacts[k - 1], |g, z| if z > 0.0 { g } else { 0.0 })
            };
            let mut weighted = delta.map(|v| v * v);
            for (j, mut col) in weighted.column_iter_mut().enumerate() {
                col *= p[(y, j)];
            }
            v_w[k - 1] += &weighted * squared_inputs[k - 1].transpose();
            v_b[k - 1] += weighted.column_sum();
        }
    }
    let n = data.len() as f64;
    let mut values = Vec::with_capacity(probe.num_parameters());
    for (w, b) in v_w.iter().zip(&v_b) {
        values.extend(w.iter().map(|v| v / n));
        values.extend(b.iter().map(|v| v / n));
    }
    Ok(Task2VecEmbedding {
        values,
        probe_id: probe.fingerprint(),
    })
}

/// Cosine similarity of two embeddings computed with the same probe.
pub fn task2vec_similarity(a: &Task2VecEmbedding, b: &Task2VecEmbedding) -> Result<f64> {
    if a.probe_id != b.probe_id {
        return Err(Error::Incomparable(format!(
            "embeddings come from different probes ({:016x} vs {:016x})",
            a.probe_id, b.probe_id
        )));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::dim("embedding lengths differ"));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero Task2Vec embedding".into()));
    }
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::{combine_hadamard, gram, psi_columns, FeatureGradientBatch};
    use crate::sketch::{sketch_batches, SketchConfig, SketchMeta};
    use crate::testbed::{generate_task, SyntheticTaskSpec, TaskFamily};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn exact_summary(f: &DenseMatrix, g: &DenseMatrix) -> SketchSummary {
        let batch = FeatureGradientBatch::new(f.clone(), g.clone(), 0, 3).unwrap();
        let meta = SketchMeta {
            layer_id: 3,
            beta: 0.5,
        };
        sketch_batches(
            SketchConfig::identity(f.ncols()).unwrap(),
            [&batch],
            true,
            meta,
        )
        .unwrap()
    }

    #[test]
    fn kme_of_single_sample_is_product_of_norms() {
        let f = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let g = DVector::from_vec(vec![3.0, 4.0]);
        let m = &g * f.transpose();
        assert!((kme_norm(&m, 1).unwrap() - 15.0).abs() < 1e-12);
        assert!(kme_norm(&m, 0).is_err());
        assert_eq!(kme_norm(&DenseMatrix::zeros(2, 3), 5).unwrap(), 0.0);
    }

    #[test]
    fn kme_equals_root_mean_kernel_entry() {
        let f = random(5, 16, 1);
        let g = random(4, 16, 2);
        let k = combine_hadamard(
            &gram(&f, Variant::Feature).unwrap(),
            &gram(&g, Variant::Gradient).unwrap(),
        )
        .unwrap();
        let mpsi = &g * f.transpose();
        let a = kme_norm(&mpsi, 16).unwrap();
        let b = kme_norm_from_kernel(k.matrix()).unwrap();
        assert!((a - b).abs() <= 1e-10 * a);
    }

    #[test]
    fn exact_diagnostics_match_brute_force() {
        let f = random(6, 32, 3);
        let g = random(5, 32, 4);
        let summary = exact_summary(&f, &g);
        let k = combine_hadamard(
            &gram(&f, Variant::Feature).unwrap(),
            &gram(&g, Variant::Gradient).unwrap(),
        )
        .unwrap();
        let d = diagnostics_for(&summary, Some(&k)).unwrap();

        let n = 32.0;
        let mu = (&g * f.transpose()).norm() / n;
        let fro = k.matrix().norm() / (n * n);
        let tr = k.matrix().trace().sqrt() / n;
        for (got, want) in [
            (d.mu_norm, mu),
            (d.k_fro_scaled, fro),
            (d.tr_sqrt_scaled, tr),
            (d.ratio_cka, mu / fro),
            (d.ratio_nbs, mu / tr),
        ] {
            assert!((got - want).abs() <= 1e-10 * want.abs(), "{got} vs {want}");
        }
        assert!((d.log_scalar.unwrap() - (mu / fro).ln()).abs() < 1e-10);
        assert!(!d.sketched);
        assert_eq!((d.layer_id, d.samples), (3, 32));

        // the identity sketch reproduces the same numbers without the dense kernel
        let from_summary = diagnostics_for(&summary, None).unwrap();
        assert!((from_summary.k_fro_scaled - fro).abs() <= 1e-10 * fro);
        assert!(!from_summary.sketched);
    }

    #[test]
    fn zero_gradients_give_zero_ratios() {
        let f = random(4, 10, 5);
        let g = DenseMatrix::zeros(3, 10);
        let d = diagnostics_for(&exact_summary(&f, &g), None).unwrap();
        assert_eq!((d.mu_norm, d.ratio_cka, d.ratio_nbs), (0.0, 0.0, 0.0));
        assert_eq!(d.log_scalar, None);
    }

    #[test]
    fn missing_accumulator_is_reported() {
        let f = random(4, 10, 5);
        let batch = FeatureGradientBatch::new(f.clone(), f, 0, 0).unwrap();
        let s = sketch_batches(
            SketchConfig::count_sketch(8, 1).unwrap(),
            [&batch],
            false,
            SketchMeta::default(),
        )
        .unwrap();
        assert!(matches!(
            diagnostics_for(&s, None),
            Err(Error::InsufficientAccumulators(_))
        ));
    }

    /// Sketching ψ directly preserves `‖K‖_F` (subspace embedding of a
    /// low-rank Ψ); the Hadamard of separately sketched kernels does not.
    #[test]
    fn frobenius_estimate_from_sketched_psi() {
        let (n, m) = (2048, 512);
        let f = &random(4, 2, 6) * random(2, n, 7);
        let g = &random(3, 2, 8) * random(2, n, 9);
        let psi = psi_columns(&f, &g).unwrap();
        let exact = combine_hadamard(
            &gram(&f, Variant::Feature).unwrap(),
            &gram(&g, Variant::Gradient).unwrap(),
        )
        .unwrap()
        .matrix()
        .norm();
        let mut psi_ok = 0;
        let mut hadamard_dev = 0.0;
        for seed in 0..100 {
            let cfg = SketchConfig::count_sketch(m, seed).unwrap();
            let s = crate::sketch::countsketch_matrix(&cfg, n).unwrap();
            let sk = &psi * s.transpose();
            let est = (sk.transpose() * &sk).norm();
            if (est - exact).abs() <= 0.15 * exact {
                psi_ok += 1;
            }
            let batch = FeatureGradientBatch::new(f.clone(), g.clone(), 0, 0).unwrap();
            let summary = sketch_batches(cfg, [&batch], true, SketchMeta::default()).unwrap();
            let d = diagnostics_for(&summary, None).unwrap();
            hadamard_dev += (d.k_fro_scaled * (n * n) as f64 - exact) / exact / 100.0;
        }
        assert!(psi_ok >= 90, "{psi_ok}/100 seeds within 15%");
        assert!(
            hadamard_dev > 0.15,
            "mean relative deviation {hadamard_dev}"
        );
    }

    fn small_task() -> (MlpNetwork, Dataset) {
        let mut spec = SyntheticTaskSpec::new(TaskFamily::BlobsFine, 3, 60, 4);
        spec.input_dim = 5;
        (
            MlpNetwork::new(&[5, 8, 6, 3], 12).unwrap(),
            generate_task(&spec).unwrap(),
        )
    }

    #[test]
    fn fr_norm_of_constant_network() {
        let mut net = MlpNetwork::new(&[2, 3, 2], 0).unwrap();
        let zeros = vec![0.0; net.num_parameters()];
        net.set_flat_parameters(&zeros).unwrap();
        net.biases_mut()[1][0] = 1.0;
        net.biases_mut()[1][1] = -1.0;
        let data = Dataset::new(random(2, 7, 1), vec![0, 1, 0, 1, 1, 0, 1], 2).unwrap();
        // z = (1, -1) everywhere; ⟨z, p − e_y⟩ = z·p − z_y
        let e = 1f64.exp();
        let p0 = e / (e + 1.0 / e);
        let zp = p0 - (1.0 - p0);
        let (q0, q1) = {
            let a = (0.5f64).exp();
            let b = (-0.5f64).exp();
            (a / (a + b), b / (a + b))
        };
        let moment = q0 * (zp - 1.0).powi(2) + q1 * (zp + 1.0).powi(2);
        let want = 3.0 * moment.sqrt();
        assert!((fr_norm(&net, &data, 0.5).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn fr_norm_is_invariant_to_rescaling_consecutive_layers() {
        let (net, data) = small_task();
        let mut scaled = net.clone();
        scaled.weights_mut()[0] *= 3.0;
        scaled.biases_mut()[0] *= 3.0;
        scaled.weights_mut()[1] /= 3.0;
        let a = fr_norm(&net, &data, 0.5).unwrap();
        let b = fr_norm(&scaled, &data, 0.5).unwrap();
        assert!((a - b).abs() <= 1e-10 * a);
    }

    #[test]
    fn per_layer_fr_at_the_top_is_the_fr_norm() {
        let (net, data) = small_task();
        let top = fr_norm_at_layer(&net, &data, 0.5, 3).unwrap();
        assert_eq!(top, fr_norm(&net, &data, 0.5).unwrap());
        assert!(fr_norm_at_layer(&net, &data, 0.5, 1).unwrap() > 0.0);
        assert!(fr_norm_at_layer(&net, &data, 0.5, 0).is_err());
    }

    #[test]
    fn fr_distance_examples() {
        assert_eq!(fr_distance(2.0, 2.0).unwrap(), 0.0);
        assert!((fr_distance(1.0, 4.0).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(
            fr_distance(1.0, 4.0).unwrap(),
            fr_distance(4.0, 1.0).unwrap()
        );
        assert!(fr_distance(0.0, 1.0).is_err());
        assert!(fr_distance(-1.0, 1.0).is_err());
    }

    #[test]
    fn log_likelihood_gradient_matches_finite_differences() {
        let mut net = MlpNetwork::new(&[2, 3, 2], 5).unwrap();
        let x = [0.7, -1.1];
        let base = net.flat_parameters();
        let log_p = |net: &MlpNetwork, y: usize| {
            let z = net.logits(&DVector::from_column_slice(&x)).unwrap();
            let max = z.max();
            z[y] - max - z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        };
        for y in 0..2 {
            let grad = log_likelihood_gradient(&net, &x, y).unwrap();
            for i in 0..base.len() {
                let h = 1e-6;
                let mut up = base.clone();
                up[i] += h;
                net.set_flat_parameters(&up).unwrap();
                let lu = log_p(&net, y);
                let mut down = base.clone();
                down[i] -= h;
                net.set_flat_parameters(&down).unwrap();
                let ld = log_p(&net, y);
                net.set_flat_parameters(&base).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1e-3),
                    "param {i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn task2vec_matches_per_sample_sum() {
        let (net, data) = small_task();
        let data = data.head(10);
        let emb = task2vec(&net, &data).unwrap();
        let mut want = vec![0.0; net.num_parameters()];
        for j in 0..data.len() {
            let x: Vec<f64> = data.inputs().column(j).iter().copied().collect();
            let z = net.logits(&DVector::from_column_slice(&x)).unwrap();
            let p = softmax_columns(&DenseMatrix::from_column_slice(3, 1, z.as_slice()), 1.0);
            for y in 0..3 {
                let g = log_likelihood_gradient(&net, &x, y).unwrap();
                for (w, gi) in want.iter_mut().zip(&g) {
                    *w += p[y] * gi * gi / data.len() as f64;
                }
            }
        }
        for (a, b) in emb.values.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(emb.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn task2vec_similarity_examples() {
        let (net, data) = small_task();
        let a = task2vec(&net, &data).unwrap();
        assert!((task2vec_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let e1 = Task2VecEmbedding {
            values: vec![1.0, 0.0],
            probe_id: 7,
        };
        let e2 = Task2VecEmbedding {
            values: vec![0.0, 2.0],
            probe_id: 7,
        };
        assert_eq!(task2vec_similarity(&e1, &e2).unwrap(), 0.0);
        let other = Task2VecEmbedding { probe_id: 8, ..e2 };
        assert!(matches!(
            task2vec_similarity(&e1, &other),
            Err(Error::Incomparable(_))
        ));
    }
}
