use thiserror::Error;

#[derive(Debug, Error)]
pub enum BridgeError {
    /// Caller handed in something that violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A computation produced a non-finite value or broke a numerical invariant.
    #[error("numerical fault: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, BridgeError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(BridgeError::InvalidInput(msg.into()))
}

pub(crate) fn numerical<T>(msg: impl Into<String>) -> Result<T> {
    Err(BridgeError::Numerical(msg.into()))
}
