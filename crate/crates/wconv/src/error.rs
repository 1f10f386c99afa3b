//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Experiment configuration is missing, malformed, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A binary or text payload does not match its documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for configuration problems, 2 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
