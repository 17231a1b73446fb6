//! File formats and report emission.
//!
//! Both binary formats are little-endian with no padding between fields.

mod ksum;
mod nnsh;
mod report;

pub use ksum::{ksum_from_bytes, ksum_to_bytes, read_ksum, write_ksum, KSUM_HEADER_LEN};
pub use nnsh::{nnsh_from_bytes, nnsh_to_bytes, read_nnsh, write_nnsh, Dtype, NNSH_HEADER_LEN};
pub use report::{
    read_labels, write_labels, DiagnosticsReport, ReportFormat, ScoreReport, ScoreRow,
};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn parse_error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// Checks that exactly `payload` bytes follow the current position.
    fn expect_remaining(&self, payload: usize) -> Result<()> {
        let expected = self.pos + payload;
        match self.bytes.len().cmp(&expected) {
            std::cmp::Ordering::Less => Err(Error::Truncated {
                expected,
                actual: self.bytes.len(),
            }),
            std::cmp::Ordering::Greater => Err(self.parse_error(
                expected,
                format!(
                    "{} trailing bytes after the payload",
                    self.bytes.len() - expected
                ),
            )),
            std::cmp::Ordering::Equal => Ok(()),
        }
    }

    fn matrix_f64(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(DenseMatrix::from_vec(rows, cols, data))
    }

    fn matrix_f32(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from(self.f32()?));
        }
        Ok(DenseMatrix::from_vec(rows, cols, data))
    }
}

/// `a · b · width` as a byte count, rejecting overflow.
fn payload_size(dims: &[(u64, u64)], width: usize, offset: usize) -> Result<usize> {
    let mut total: usize = 0;
    for &(a, b) in dims {
        let n = usize::try_from(a)
            .ok()
            .zip(usize::try_from(b).ok())
            .and_then(|(a, b)| a.checked_mul(b))
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| total.checked_add(n))
            .ok_or(Error::Parse {
                offset,
                message: "declared dimensions overflow the address space".into(),
            })?;
        total = n;
    }
    Ok(total)
}
