use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by the CLI exit code they map to: data problems
/// (bad shapes, bad files, incompatible summaries) exit with 3, numeric
/// failures (non-finite values, non-PSD input, singular systems) with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid sketch configuration: {0}")]
    Config(String),

    #[error("sketch is empty: no samples were absorbed")]
    EmptySketch,

    #[error("incomparable summaries: {0}")]
    Incomparable(String),

    #[error("insufficient accumulators: {0}")]
    InsufficientAccumulators(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e}, tolerance {tol:e})")]
    NotPsd { min_eigenvalue: f64, tol: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("score {0} exceeds 1 beyond roundoff")]
    ScoreOutOfRange(f64),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

impl Error {
    /// Process exit code for the CLI: 3 for data errors, 4 for numeric errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_)
            | Error::NotPsd { .. }
            | Error::Degenerate(_)
            | Error::Singular(_)
            | Error::ScoreOutOfRange(_)
            | Error::Diverged { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
