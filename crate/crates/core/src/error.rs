use thiserror::Error;

/// Errors raised by the samplers, targets and diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure at particle {index}: {reason}")]
    NumericalFailure { index: usize, reason: String },

    #[error("numerical failure: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn check_dims(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return invalid(format!("{what}: expected dimension {expected}, got {got}"));
    }
    Ok(())
}
