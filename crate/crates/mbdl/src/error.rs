//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; the message names both shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A symmetric factorization hit a non-positive pivot.
    #[error("matrix is not positive definite: pivot {pivot:.3e} at index {index}")]
    NotSpd { index: usize, pivot: f64 },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed or inconsistent serialized data.
    #[error("format error: {0}")]
    Format(String),

    /// A solver or training loop failed numerically (NaN, divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Bad experiment or solver configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
