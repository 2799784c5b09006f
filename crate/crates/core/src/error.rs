use thiserror::Error;

/// Crate-wide error type.
///
/// Variants follow the failure classes the public operations are allowed
/// to produce: shape mismatches, misuse of an API, bad configuration, and
/// malformed files.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or token-matrix shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An operation was called in a state it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A persisted file is malformed. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
