use std::fs;
use std::path::Path;

use super::{payload_size, Reader};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::sketch::{Hashing, SketchConfig, SketchMeta, SketchSummary, SummaryParts};

const MAGIC: &[u8; 4] = b"KSUM";
const VERSION: u32 = 1;
const FLAG_MPSI: u32 = 1;

/// Fixed header size in bytes.
pub const KSUM_HEADER_LEN: usize = 4 + 4 + 4 + 5 * 8 + 4 + 4 + 8 + 3 * 8;

fn put_matrix(out: &mut Vec<u8>, m: &DenseMatrix) {
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn ksum_to_bytes(summary: &SketchSummary) -> Result<Vec<u8>> {
    let cfg = summary.config();
    if cfg.hashing() == Hashing::Identity {
        return Err(Error::Config(
            "identity assignments are a test path and are not persisted".into(),
        ));
    }
    let mpsi = summary.mpsi();
    let (df, dg, m) = (
        summary.feature_dim(),
        summary.gradient_dim(),
        summary.buckets(),
    );
    let mut out =
        Vec::with_capacity(KSUM_HEADER_LEN + 8 * (df * m + dg * m + mpsi.map_or(0, |x| x.len())));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if mpsi.is_some() { FLAG_MPSI } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [
        m as u64,
        df as u64,
        dg as u64,
        summary.samples(),
        cfg.seed(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let blocks =
        u32::try_from(cfg.blocks()).map_err(|_| Error::Config("block count exceeds u32".into()))?;
    out.extend_from_slice(&blocks.to_le_bytes());
    out.extend_from_slice(&summary.meta().layer_id.to_le_bytes());
    for v in [
        summary.meta().beta,
        summary.trace_f(),
        summary.trace_g(),
        summary.trace_fg(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_matrix(&mut out, summary.feature_sketch());
    put_matrix(&mut out, summary.gradient_sketch());
    if let Some(mp) = mpsi {
        put_matrix(&mut out, mp);
    }
    Ok(out)
}

pub fn ksum_from_bytes(bytes: &[u8]) -> Result<SketchSummary> {
    let mut r = Reader::new(bytes);
    let magic = r.take::<4>()?;
    if &magic != MAGIC {
        return Err(r.parse_error(0, format!("bad magic {magic:02x?}, expected \"KSUM\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.parse_error(4, format!("unsupported version {version}")));
    }
    let flags = r.u32()?;
    if flags & !FLAG_MPSI != 0 {
        return Err(r.parse_error(8, format!("reserved flag bits set: {flags:#x}")));
    }
    let m = r.u64()?;
    let df = r.u64()?;
    let dg = r.u64()?;
    let n = r.u64()?;
    let seed = r.u64()?;
    let blocks = r.u32()?;
    let layer_id = r.u32()?;
    let beta = r.f64()?;
    let trace_f = r.f64()?;
    let trace_g = r.f64()?;
    let trace_fg = r.f64()?;
    debug_assert_eq!(r.pos, KSUM_HEADER_LEN);

    if m == 0 {
        return Err(r.parse_error(12, "bucket count is zero"));
    }
    if df == 0 || dg == 0 {
        return Err(r.parse_error(20, "feature and gradient dimensions must be positive"));
    }
    if n == 0 {
        return Err(r.parse_error(36, "summary holds no samples"));
    }
    let mut dims = vec![(df, m), (dg, m)];
    if flags & FLAG_MPSI != 0 {
        dims.push((dg, df));
    }
    let payload = payload_size(&dims, 8, 12)?;
    r.expect_remaining(payload)?;

    let config = SketchConfig::new(m as usize, seed, blocks as usize)
        .map_err(|e| r.parse_error(52, e.to_string()))?;
    let features = r.matrix_f64(df as usize, m as usize)?;
    let gradients = r.matrix_f64(dg as usize, m as usize)?;
    let mpsi = if flags & FLAG_MPSI != 0 {
        Some(r.matrix_f64(dg as usize, df as usize)?)
    } else {
        None
    };
    linalg::ensure_finite(&features, "stored feature sketch")?;
    linalg::ensure_finite(&gradients, "stored gradient sketch")?;
    if let Some(mp) = &mpsi {
        linalg::ensure_finite(mp, "stored mean-embedding accumulator")?;
    }
    SketchSummary::from_parts(SummaryParts {
        config,
        meta: SketchMeta { layer_id, beta },
        features,
        gradients,
        samples: n,
        trace_f,
        trace_g,
        trace_fg,
        mpsi,
    })
}

pub fn write_ksum(path: impl AsRef<Path>, summary: &SketchSummary) -> Result<()> {
    fs::write(path, ksum_to_bytes(summary)?)?;
    Ok(())
}

pub fn read_ksum(path: impl AsRef<Path>) -> Result<SketchSummary> {
    ksum_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::FeatureGradientBatch;
    use crate::sketch::sketch_batches;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn summary(track: bool) -> SketchSummary {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = DenseMatrix::from_fn(5, 40, |_, _| rng.sample(StandardNormal));
        let g = DenseMatrix::from_fn(3, 40, |_, _| rng.sample(StandardNormal));
        let batch = FeatureGradientBatch::new(f, g, 0, 2).unwrap();
        let meta = SketchMeta {
            layer_id: 2,
            beta: 0.5,
        };
        sketch_batches(SketchConfig::new(16, 99, 2).unwrap(), [&batch], track, meta).unwrap()
    }

    #[test]
    fn header_layout() {
        let s = summary(true);
        let bytes = ksum_to_bytes(&s).unwrap();
        assert_eq!(KSUM_HEADER_LEN, 92);
        assert_eq!(&bytes[..4], b"KSUM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 16);
        assert_eq!(u64::from_le_bytes(bytes[36..44].try_into().unwrap()), 40);
        assert_eq!(u64::from_le_bytes(bytes[44..52].try_into().unwrap()), 99);
        assert_eq!(u32::from_le_bytes(bytes[52..56].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[56..60].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[60..68].try_into().unwrap()), 0.5);
        assert_eq!(bytes.len(), 92 + 8 * (5 * 16 + 3 * 16 + 3 * 5));
        // first stored value is F̃[0, 0]
        assert_eq!(
            f64::from_le_bytes(bytes[92..100].try_into().unwrap()),
            s.feature_sketch()[(0, 0)]
        );
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for track in [false, true] {
            let s = summary(track);
            let bytes = ksum_to_bytes(&s).unwrap();
            let back = ksum_from_bytes(&bytes).unwrap();
            assert_eq!(back, s);
            assert_eq!(ksum_to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_names_both_lengths() {
        let bytes = ksum_to_bytes(&summary(true)).unwrap();
        let full = bytes.len();
        match ksum_from_bytes(&bytes[..full - 3]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (full, full - 3))
            }
            other => panic!("{other:?}"),
        }
        match ksum_from_bytes(&bytes[..50]) {
            Err(Error::Truncated { actual: 50, .. }) => {}
            other => panic!("{other:?}"),
        }
        let msg = ksum_from_bytes(&bytes[..full - 3]).unwrap_err().to_string();
        assert!(msg.contains(&full.to_string()) && msg.contains(&(full - 3).to_string()));
    }

    #[test]
    fn header_errors_carry_offsets() {
        let good = ksum_to_bytes(&summary(false)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            ksum_from_bytes(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            ksum_from_bytes(&bad),
            Err(Error::Parse { offset: 4, .. })
        ));
        let mut bad = good.clone();
        bad[8] = 0b100;
        assert!(matches!(
            ksum_from_bytes(&bad),
            Err(Error::Parse { offset: 8, .. })
        ));
        let mut bad = good.clone();
        bad[52] = 3; // 3 blocks do not divide 16 buckets
        assert!(matches!(
            ksum_from_bytes(&bad),
            Err(Error::Parse { offset: 52, .. })
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(ksum_from_bytes(&bad), Err(Error::Parse { .. })));
        let mut bad = good;
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(ksum_from_bytes(&bad).is_err());
    }

    #[test]
    fn summaries_without_mpsi_lack_diagnostics() {
        let back = ksum_from_bytes(&ksum_to_bytes(&summary(false)).unwrap()).unwrap();
        assert!(back.mpsi().is_none());
        assert!(matches!(
            crate::diagnostics::diagnostics_for(&back, None),
            Err(Error::InsufficientAccumulators(_))
        ));
    }

    #[test]
    fn identity_summaries_are_not_written() {
        let f = DenseMatrix::identity(2, 2);
        let batch = FeatureGradientBatch::new(f.clone(), f, 0, 0).unwrap();
        let s = sketch_batches(
            SketchConfig::identity(2).unwrap(),
            [&batch],
            false,
            SketchMeta::default(),
        )
        .unwrap();
        assert!(matches!(ksum_to_bytes(&s), Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ksum");
        let s = summary(true);
        write_ksum(&path, &s).unwrap();
        assert_eq!(read_ksum(&path).unwrap(), s);
        assert!(matches!(
            read_ksum(dir.path().join("missing.ksum")),
            Err(Error::Io(_))
        ));
    }
}
