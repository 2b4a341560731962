//! Error type shared by all modules.

/// Errors raised by tensor ops, model construction, data handling and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Mismatched tensor extents in an op (names both shapes involved).
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Token-grid or spatial layout violates a divisibility/window constraint.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// An API precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// Malformed checkpoint or other serialized artifact.
    #[error("format error: {0}")]
    Format(String),
    /// Dataset file problems (missing mask, size mismatch, unreadable image).
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values encountered during optimization.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
