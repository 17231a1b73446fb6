//! Randomized property suites behind `kernsim verify`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::similarity::{self, check_alt_inequality, sketched_cka_trial, BoundTrialResult};
use crate::sketch::SketchConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub passed: bool,
    pub stats: Vec<(String, f64)>,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, {} failures",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.trials,
            self.failures
        )?;
        for (k, v) in &self.stats {
            write!(f, ", {k}={v:.6e}")?;
        }
        Ok(())
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A random Gram matrix of random size and rank.
fn random_psd(rng: &mut impl Rng, n: usize) -> DenseMatrix {
    let rank = rng.random_range(1..=n);
    let a = gaussian(rng, n, rank);
    linalg::symmetrize(&(&a * a.transpose()))
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub(crate) fn random_orthogonal(rng: &mut impl Rng, n: usize) -> DenseMatrix {
    gaussian(rng, n, n).qr().q()
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(Error::InvalidInput("at least one trial is required".into()))
    } else {
        Ok(())
    }
}

/// `ρ_CKA(K1, K2) ≤ ρ_NBS(K1², K2²)` on random PSD pairs.
pub fn alt_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    check_trials(trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..trials {
        let n = rng.random_range(2..=12);
        let k1 = random_psd(&mut rng, n);
        let k2 = random_psd(&mut rng, n);
        let check = check_alt_inequality(&k1, &k2)?;
        min_gap = min_gap.min(check.rhs - check.lhs);
        if !check.holds {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        suite: "alt",
        trials,
        failures,
        passed: failures == 0,
        stats: vec![("min_gap".into(), min_gap)],
    })
}

/// Correlated feature maps sharing an 8-dimensional latent factor.
pub fn correlated_maps(rng: &mut impl Rng, d: usize, n: usize) -> (DenseMatrix, DenseMatrix) {
    let latent = gaussian(rng, 8, n);
    let a = gaussian(rng, d, 8);
    let b = gaussian(rng, d, 8);
    let psi1 = &a * &latent + gaussian(rng, d, n) * 0.3;
    let psi2 = &b * &latent + gaussian(rng, d, n) * 0.5;
    (psi1, psi2)
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = ((v.len() - 1) as f64 * q).round() as usize;
    v[pos]
}

/// Outcome of the shared-sketch bound experiment.
#[derive(Debug, Clone)]
pub struct BoundExperiment {
    pub trials: Vec<BoundTrialResult>,
    pub eps_hat: f64,
    pub within: usize,
}

/// Sketches a fixed pair of maps with `trials` seeds and checks
/// `|ρ̃ − ρ| ≤ 4ε̂/(1−ε̂)² ρ` with ε̂ the 95th percentile of per-seed ε.
pub fn bound_experiment(
    psi1: &DenseMatrix,
    psi2: &DenseMatrix,
    buckets: usize,
    trials: usize,
    seed: u64,
) -> Result<BoundExperiment> {
    check_trials(trials)?;
    let results = (0..trials as u64)
        .map(|t| {
            sketched_cka_trial(
                psi1,
                psi2,
                &SketchConfig::count_sketch(buckets, seed.wrapping_add(t))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let eps: Vec<f64> = results.iter().map(BoundTrialResult::epsilon).collect();
    let eps_hat = quantile(&eps, 0.95);
    let within = results.iter().filter(|r| r.within_bound(eps_hat)).count();
    Ok(BoundExperiment {
        trials: results,
        eps_hat,
        within,
    })
}

/// Shared-sketch CKA lemma checks at `N = 2048`, `d = 32`.
pub fn sketch_bound_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (psi1, psi2) = correlated_maps(&mut rng, 32, 2048);
    let large = bound_experiment(&psi1, &psi2, 512, trials, seed)?;
    let small = bound_experiment(&psi1, &psi2, 128, trials, seed)?;
    let med = |e: &BoundExperiment| {
        let errs: Vec<f64> = e
            .trials
            .iter()
            .map(|t| (t.rho_sketched - t.rho_exact).abs())
            .collect();
        quantile(&errs, 0.5)
    };
    let (m512, m128) = (med(&large), med(&small));
    let chain_ok =
        large.within as f64 >= 0.95 * trials as f64 && small.within as f64 >= 0.95 * trials as f64;
    let passed = chain_ok && m512 < m128;
    Ok(SuiteReport {
        suite: "sketch-bounds",
        trials,
        failures: (trials - large.within) + (trials - small.within) + usize::from(m512 >= m128),
        passed,
        stats: vec![
            ("rho_exact".into(), large.trials[0].rho_exact),
            ("eps_hat_512".into(), large.eps_hat),
            ("eps_hat_128".into(), small.eps_hat),
            ("median_err_512".into(), m512),
            ("median_err_128".into(), m128),
        ],
    })
}

/// Largest deviation of each index axiom over random trials.
#[derive(Debug, Clone, Copy, Default)]
pub struct AxiomDeviations {
    pub self_similarity: f64,
    pub range_excess: f64,
    pub isotropic_scale: f64,
    pub rotation: f64,
    pub permutation: f64,
}

impl AxiomDeviations {
    pub fn max(&self) -> f64 {
        [
            self.self_similarity,
            self.range_excess,
            self.isotropic_scale,
            self.rotation,
            self.permutation,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Self-similarity, range, and invariance to isotropic scaling, rotation of
/// the feature space and a shared sample permutation, for both indices.
pub fn axiom_deviations(trials: usize, seed: u64) -> Result<AxiomDeviations> {
    check_trials(trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = AxiomDeviations::default();
    for _ in 0..trials {
        let n = rng.random_range(3..=16);
        let d = rng.random_range(1..=8);
        let phi1 = gaussian(&mut rng, d, n);
        let d2 = rng.random_range(1..=8);
        let phi2 = gaussian(&mut rng, d2, n);
        let gram = |p: &DenseMatrix| linalg::symmetrize(&(p.transpose() * p));
        let (k1, k2) = (gram(&phi1), gram(&phi2));

        let rotated = random_orthogonal(&mut rng, d) * &phi1;
        let scale = rng.random_range(0.01..100.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |k: &DenseMatrix| DenseMatrix::from_fn(n, n, |i, j| k[(perm[i], perm[j])]);

        let indices: [fn(&DenseMatrix, &DenseMatrix) -> Result<f64>; 2] =
            [similarity::cka_value, |a, b| {
                similarity::nbs_value(a, b, linalg::DEFAULT_REL_TOL)
            }];
        for index in indices {
            let base = index(&k1, &k2)?;
            dev.self_similarity = dev.self_similarity.max((index(&k1, &k1)? - 1.0).abs());
            dev.range_excess = dev.range_excess.max((base - 1.0).max(-base).max(0.0));
            dev.isotropic_scale = dev
                .isotropic_scale
                .max((index(&(&k1 * scale), &k2)? - base).abs());
            dev.rotation = dev
                .rotation
                .max((index(&gram(&rotated), &k2)? - base).abs());
            dev.permutation = dev
                .permutation
                .max((index(&permute(&k1), &permute(&k2))? - base).abs());
        }
    }
    Ok(dev)
}

pub fn invariance_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let dev = axiom_deviations(trials, seed)?;
    let passed = dev.max() <= 1e-8;
    Ok(SuiteReport {
        suite: "invariance",
        trials,
        failures: usize::from(!passed),
        passed,
        stats: vec![
            ("self".into(), dev.self_similarity),
            ("range".into(), dev.range_excess),
            ("scale".into(), dev.isotropic_scale),
            ("rotation".into(), dev.rotation),
            ("permutation".into(), dev.permutation),
        ],
    })
}
