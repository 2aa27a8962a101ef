//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input violated a mathematical precondition (non-finite
    /// value, non-positive discrimination, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an API contract (dimension mismatch, bad order
    /// grid, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A fixed-point value left the representable range.
    #[error("range error: {0}")]
    Range(String),

    /// The federation round protocol was violated or aborted.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Response data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
