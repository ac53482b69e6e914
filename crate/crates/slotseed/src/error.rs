//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A value left the mathematical domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// More clusters requested than there are data points.
    #[error("capacity error: requested {requested} centers from {available} points")]
    Capacity { requested: usize, available: usize },

    /// A mapping variant cannot be used in the requested configuration.
    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    /// An input too degenerate to process (e.g. zero slots).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor container parse failures, one variant per failure mode.
    #[error("container parse error: {0}")]
    Parse(#[from] ParseError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Failure modes when decoding a tensor container file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic (expected \"SLTC\")")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated container: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0} extra")]
    TrailingBytes(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
