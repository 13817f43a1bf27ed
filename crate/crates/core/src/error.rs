//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Shape or extent mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation contract (non-scalar loss, bad labels, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed vocabulary, count table, or checkpoint input.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn dim(msg: impl Into<String>) -> Self {
        CoreError::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}
