use std::fmt;

use noisyquant_core::Error as CoreError;

/// Failure classes of the command line, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, invalid parameter values.
    Config(String),
    /// Model, data or artifact files could not be read or written.
    Io(String),
    /// Inputs are well-formed but violate a precondition.
    Precondition(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Precondition(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self::Io(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Self::Precondition(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
            Self::Precondition(m) => write!(f, "precondition failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Io(_)
            | CoreError::Json(_)
            | CoreError::Format(_)
            | CoreError::LengthMismatch { .. }
            | CoreError::NonFinite { .. } => Self::Io(msg),
            CoreError::Shape(_)
            | CoreError::InvalidArgument(_)
            | CoreError::Infeasible(_)
            | CoreError::Overflow(_)
            | CoreError::Uncalibrated(_)
            | CoreError::Unsupported(_) => Self::Precondition(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Any failure while loading an input file is an I/O failure.
pub trait Loading<T> {
    fn loading(self, what: &str, path: &std::path::Path) -> CliResult<T>;
}

impl<T> Loading<T> for noisyquant_core::Result<T> {
    fn loading(self, what: &str, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| CliError::Io(format!("{what} {}: {e}", path.display())))
    }
}
