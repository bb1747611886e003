use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum AspoError {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Decoding a response produced nothing usable.
    #[error("generation failed: {0}")]
    Generation(String),

    /// Training hit a NaN or infinite loss.
    #[error("non-finite loss at step {step}: loss={loss}, margin={margin}")]
    NonFinite { step: usize, loss: f64, margin: f64 },

    /// A serialized artifact could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AspoError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(AspoError::InvalidInput(msg.into()))
}
