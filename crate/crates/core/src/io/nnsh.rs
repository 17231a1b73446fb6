use std::fs;
use std::path::Path;

use super::{payload_size, Reader};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::representation::FeatureGradientBatch;

const MAGIC: &[u8; 4] = b"NNSH";
const VERSION: u32 = 1;

/// Fixed header size in bytes.
pub const NNSH_HEADER_LEN: usize = 4 + 4 + 4 + 4 * 8 + 4;

/// Element type of the stored blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DenseMatrix, dtype: Dtype) {
    for &v in m.iter() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

/// Serializes a shard. With [`Dtype::F32`] values are rounded to single precision.
pub fn nnsh_to_bytes(batch: &FeatureGradientBatch, dtype: Dtype) -> Result<Vec<u8>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput(
            "shards must hold at least one sample".into(),
        ));
    }
    let (df, dg, n) = (batch.feature_dim(), batch.gradient_dim(), batch.len());
    let mut out = Vec::with_capacity(NNSH_HEADER_LEN + dtype.width() * n * (df + dg));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    for v in [df as u64, dg as u64, n as u64, batch.first_index()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&batch.layer_id().to_le_bytes());
    put_matrix(&mut out, batch.features(), dtype);
    put_matrix(&mut out, batch.gradients(), dtype);
    Ok(out)
}

pub fn nnsh_from_bytes(bytes: &[u8]) -> Result<(FeatureGradientBatch, Dtype)> {
    let mut r = Reader::new(bytes);
    let magic = r.take::<4>()?;
    if &magic != MAGIC {
        return Err(r.parse_error(0, format!("bad magic {magic:02x?}, expected \"NNSH\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.parse_error(4, format!("unsupported version {version}")));
    }
    let dtype = match r.u32()? {
        0 => Dtype::F64,
        1 => Dtype::F32,
        other => return Err(r.parse_error(8, format!("unknown dtype code {other}"))),
    };
    let df = r.u64()?;
    let dg = r.u64()?;
    let n = r.u64()?;
    let first = r.u64()?;
    let layer_id = r.u32()?;
    debug_assert_eq!(r.pos, NNSH_HEADER_LEN);
    if n == 0 {
        return Err(r.parse_error(28, "shard holds no samples"));
    }
    let payload = payload_size(&[(df, n), (dg, n)], dtype.width(), 12)?;
    r.expect_remaining(payload)?;
    let (df, dg, n) = (df as usize, dg as usize, n as usize);
    let (f, g) = match dtype {
        Dtype::F64 => (r.matrix_f64(df, n)?, r.matrix_f64(dg, n)?),
        Dtype::F32 => (r.matrix_f32(df, n)?, r.matrix_f32(dg, n)?),
    };
    Ok((FeatureGradientBatch::new(f, g, first, layer_id)?, dtype))
}

pub fn write_nnsh(
    path: impl AsRef<Path>,
    batch: &FeatureGradientBatch,
    dtype: Dtype,
) -> Result<()> {
    fs::write(path, nnsh_to_bytes(batch, dtype)?)?;
    Ok(())
}

pub fn read_nnsh(path: impl AsRef<Path>) -> Result<(FeatureGradientBatch, Dtype)> {
    nnsh_from_bytes(&fs::read(path)?)
}
