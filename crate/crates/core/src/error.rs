//! Error type shared by all modules.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not match what an operation requires.
    ShapeMismatch(String),
    /// A value that must be finite is NaN or infinite.
    NonFinite(String),
    /// Malformed on-disk data (bad magic, truncated payload, unsupported version).
    Format(String),
    /// Invalid configuration (bad key, bad value, inconsistent settings).
    Config(String),
    /// Graph construction or execution error.
    Graph(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Graph(msg) => write!(f, "graph error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
