use thiserror::Error;

/// Errors produced by the quantization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A theory precondition (e.g. `x <= n <= 2b - x`) does not hold.
    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("length mismatch: header declares {expected} values, payload holds {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("integer accumulator overflow: {0}")]
    Overflow(String),

    #[error("not calibrated: {0}")]
    Uncalibrated(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
