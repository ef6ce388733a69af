//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file or byte stream does not match its expected format.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// An API was used out of order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for a format error with a byte offset.
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}
