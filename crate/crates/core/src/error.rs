//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error type for all library operations.
#[derive(Debug, Error)]
pub enum FeraError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation only supports a restricted set of shapes.
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    /// A computation produced or would produce non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input is degenerate (e.g. zero total energy); the caller decides the fallback.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An index (e.g. a timestep) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A lookup key (e.g. a layer id) is unknown.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A run configuration is invalid or incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be parsed as the expected format.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeraError>;
