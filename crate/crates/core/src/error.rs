//! Error type shared across the crate.

/// Convenience alias used by every fallible function in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes (or ranks) do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is out of range or otherwise invalid.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    /// The payload names the tensor/operation and the offending flat index.
    #[error("non-finite value in {context} at flat index {index}: {value}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },

    /// A structural rewrite (BN fold, conv merge, ...) was asked to do
    /// something it cannot do exactly.
    #[error("fusion: {0}")]
    Fusion(String),

    /// A dataset or model file is malformed or inconsistent.
    #[error("data: {0}")]
    Data(String),

    /// A checkpoint file is malformed, truncated, or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss); the payload points at the first
    /// unit whose output went non-finite, when that could be located.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for a [`Error::Shape`] built from a format expression.
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Shorthand for [`Error::InvalidArg`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
