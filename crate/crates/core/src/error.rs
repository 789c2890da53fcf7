//! Error types shared across the crate.

use std::fmt;

/// Crate-wide error type. Variants mirror the failure classes of the
/// public contracts: shape problems, bad configuration, malformed files,
/// out-of-range indices, broken caller contracts, and numerical failures.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    Dim(String),
    /// Invalid configuration or precondition on user-supplied settings.
    Config(String),
    /// Malformed or truncated file content.
    Format(String),
    /// An index (label, class, position) is out of range.
    Index(String),
    /// A caller-side contract was violated (e.g. non-scalar loss).
    Contract(String),
    /// A precondition on an operation's arguments failed.
    Precondition(String),
    /// A numerical method failed (rank deficiency, divergence).
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Index(msg) => write!(f, "index error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Precondition(msg) => write!(f, "precondition error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
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

pub type Result<T> = std::result::Result<T, Error>;
