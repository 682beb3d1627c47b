//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the crate, flattened into one enum
/// so the CLI can map variants onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape violation; the message names the offending
    /// axis or parameter.
    #[error("shape: {0}")]
    Shape(String),
    /// Invalid configuration value (plan fields, loss settings, thresholds).
    #[error("config: {0}")]
    Config(String),
    /// Malformed or inconsistent input data (volumes, manifests, labels).
    #[error("data: {0}")]
    Data(String),
    /// Malformed serialized artifact (weight store, checkpoint, plan file).
    #[error("format: {0}")]
    Format(String),
    /// Numeric breakdown at runtime (non-finite loss, degenerate statistics).
    #[error("numeric: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// An I/O failure with call-site context (usually the path) attached.
    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(std::io::Error::other(msg.into()))
    }
}
