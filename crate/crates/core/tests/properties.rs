use kernsim::io::{ksum_from_bytes, ksum_to_bytes, nnsh_from_bytes, nnsh_to_bytes, Dtype};
use kernsim::linalg::DenseMatrix;
use kernsim::representation::{gram, FeatureGradientBatch, Variant};
use kernsim::similarity::{check_alt_inequality, cka_value, nbs_value, score, Index};
use kernsim::sketch::{hash_assignment, sketch_batches, SketchConfig, SketchMeta, SketchState};
use proptest::prelude::*;

/// `(rows × cols)` matrix with entries in [-4, 4].
fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
        .prop_map(move |v| DenseMatrix::from_vec(rows, cols, v))
}

/// A pair of feature/gradient maps over the same `n` samples.
fn maps() -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
    (1usize..6, 1usize..6, 1usize..40).prop_flat_map(|(df, dg, n)| (matrix(df, n), matrix(dg, n)))
}

fn sketch_config() -> impl Strategy<Value = SketchConfig> {
    (
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..12,
        any::<u64>(),
    )
        .prop_map(|(s, w, seed)| SketchConfig::new(s * w, seed, s).unwrap())
}

fn nonzero(k: &DenseMatrix) -> bool {
    k.norm() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indices_are_symmetric_and_bounded((f, g) in maps()) {
        let k1 = f.transpose() * &f;
        let k2 = g.transpose() * &g;
        prop_assume!(nonzero(&k1) && nonzero(&k2));
        for (a, b) in [(cka_value(&k1, &k2).unwrap(), cka_value(&k2, &k1).unwrap()),
                       (nbs_value(&k1, &k2, 1e-10).unwrap(), nbs_value(&k2, &k1, 1e-10).unwrap())] {
            prop_assert!((a - b).abs() <= 1e-9);
            prop_assert!((-1e-10..=1.0 + 1e-10).contains(&a), "{a}");
        }
    }

    #[test]
    fn centered_score_ignores_constant_feature_offsets((f, _g) in maps(), shift in -3.0f64..3.0) {
        let n = f.ncols();
        prop_assume!(n >= 3);
        let shifted = f.map(|v| v + shift);
        let reference = DenseMatrix::from_fn(2, n, |i, j| ((i + 1) * j) as f64 - 1.5);
        let kf = gram(&f, Variant::Feature).unwrap();
        let ks = gram(&shifted, Variant::Feature).unwrap();
        let kr = gram(&reference, Variant::Feature).unwrap();
        let a = score(&kf, &kr, Index::Cka, true);
        let b = score(&ks, &kr, Index::Cka, true);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a.value - b.value).abs() <= 1e-6, "{} vs {}", a.value, b.value);
        }
    }

    #[test]
    fn alt_inequality_holds((f, g) in maps()) {
        let k1 = f.transpose() * &f;
        let k2 = g.transpose() * &g;
        prop_assume!(nonzero(&k1) && nonzero(&k2));
        let check = check_alt_inequality(&k1, &k2).unwrap();
        prop_assert!(check.holds, "{} > {}", check.lhs, check.rhs);
    }

    #[test]
    fn hash_assignments_stay_in_their_block(config in sketch_config(), index in any::<u64>()) {
        let a = hash_assignment(&config, index).unwrap();
        prop_assert_eq!(a.len(), config.blocks());
        for (block, x) in a.iter().enumerate() {
            prop_assert!(x.bucket < config.block_width());
            prop_assert_eq!(x.column, block * config.block_width() + x.bucket);
            prop_assert!(x.sign == 1 || x.sign == -1);
        }
        prop_assert_eq!(hash_assignment(&config, index).unwrap(), a);
    }

    #[test]
    fn split_merge_matches_single_pass((f, g) in maps(), config in sketch_config(), cut in 0.0f64..1.0) {
        let n = f.ncols();
        let k = ((n as f64 * cut) as usize).clamp(1, n);
        let whole = FeatureGradientBatch::new(f.clone(), g.clone(), 0, 0).unwrap();
        let single = sketch_batches(config, [&whole], true, SketchMeta::default()).unwrap();

        let mut left = SketchState::new(config, f.nrows(), g.nrows(), true).unwrap();
        left.absorb(&whole.slice(0, k).unwrap()).unwrap();
        if k < n {
            let mut right = SketchState::new(config, f.nrows(), g.nrows(), true).unwrap();
            right.absorb(&whole.slice(k, n - k).unwrap()).unwrap();
            left.merge(&right).unwrap();
        }
        let merged = left.finalize().unwrap();
        prop_assert_eq!(merged.samples(), n as u64);
        prop_assert!((merged.feature_sketch() - single.feature_sketch()).amax() <= 1e-12);
        prop_assert!((merged.gradient_sketch() - single.gradient_sketch()).amax() <= 1e-12);
        prop_assert!((merged.trace_fg() - single.trace_fg()).abs() <= 1e-9 * single.trace_fg().max(1.0));
    }

    #[test]
    fn ksum_round_trip_is_byte_exact((f, g) in maps(), config in sketch_config(), track in any::<bool>(),
                                     layer in any::<u32>(), beta in 0.01f64..1.0) {
        let batch = FeatureGradientBatch::new(f, g, 0, layer).unwrap();
        let summary = sketch_batches(config, [&batch], track, SketchMeta { layer_id: layer, beta }).unwrap();
        let bytes = ksum_to_bytes(&summary).unwrap();
        let back = ksum_from_bytes(&bytes).unwrap();
        prop_assert_eq!(ksum_to_bytes(&back).unwrap(), bytes);
        prop_assert_eq!(back.meta().layer_id, layer);
        prop_assert_eq!(back.mpsi().is_some(), track);
    }

    #[test]
    fn nnsh_round_trip((f, g) in maps(), first in 0u64..1 << 40, layer in any::<u32>()) {
        let batch = FeatureGradientBatch::new(f, g, first, layer).unwrap();
        let bytes = nnsh_to_bytes(&batch, Dtype::F64).unwrap();
        let (back, dtype) = nnsh_from_bytes(&bytes).unwrap();
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert_eq!(back.features(), batch.features());
        prop_assert_eq!(back.gradients(), batch.gradients());
        prop_assert_eq!((back.first_index(), back.layer_id()), (first, layer));

        let (narrow, _) = nnsh_from_bytes(&nnsh_to_bytes(&batch, Dtype::F32).unwrap()).unwrap();
        prop_assert!((narrow.features() - batch.features()).amax() <= 4.0 * f64::from(f32::EPSILON));
    }

    #[test]
    fn truncated_ksum_is_rejected((f, g) in maps(), config in sketch_config(), cut in 1usize..64) {
        let batch = FeatureGradientBatch::new(f, g, 0, 0).unwrap();
        let summary = sketch_batches(config, [&batch], false, SketchMeta::default()).unwrap();
        let bytes = ksum_to_bytes(&summary).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(ksum_from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }
}
