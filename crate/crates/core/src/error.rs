//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Errors carry the name of the
//! operation that rejected its input plus a human-readable detail string, so a
//! failure deep inside a pipeline names its source without a backtrace.

use std::fmt;

/// All failure modes surfaced by this crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operands have incompatible shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// An argument value is outside the accepted domain.
    InvalidArgument { op: &'static str, detail: String },
    /// A non-finite value (NaN or +/-inf) was supplied or produced.
    NonFinite { op: &'static str, detail: String },
    /// A configuration was rejected during validation.
    Config(String),
    /// Filesystem or raw serialization problem.
    Io(String),
    /// A text or binary payload failed to parse.
    Parse(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn parse(detail: impl Into<String>) -> Self {
        Error::Parse(detail.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite value: {detail}"),
            Error::Config(detail) => write!(f, "config error: {detail}"),
            Error::Io(detail) => write!(f, "io error: {detail}"),
            Error::Parse(detail) => write!(f, "parse error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
