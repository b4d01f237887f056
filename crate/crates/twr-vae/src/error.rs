//! Crate-wide error type.
//!
//! Errors carry enough context to act on (offending shapes, indices, file
//! positions) without backtrace machinery. Validation problems (bad arguments,
//! malformed config) are kept distinct from runtime failures (I/O, numerical
//! breakdown) so the CLI can map them to different exit codes.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// Numerical domain violation (log of a non-positive value, exp overflow,
    /// non-finite value where a finite one is required).
    Domain(String),
    /// Invalid argument or configuration value; maps to CLI exit code 1.
    Invalid(String),
    /// Malformed or inconsistent input data (corpus, embeddings, checkpoint).
    Data(String),
    /// Underlying I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for errors that indicate caller mistakes rather than runtime
    /// failures; the CLI reports these with exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid(_) | Error::Shape(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
