use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} of the {what} matrix has zero norm")]
    ZeroNormRow { what: &'static str, row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exact OT oracle supports at most 3x3 problems, got {n}x{q}")]
    UnsupportedSize { n: usize, q: usize },

    #[error("projected {class} subspace {head} is the zero vector")]
    ZeroSubspace { class: &'static str, head: usize },

    #[error("non-finite gradient in parameter group {0}")]
    NonFiniteGradient(String),

    #[error("metric undefined: {0}")]
    Metric(&'static str),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    Version { path: PathBuf, found: u8, expected: u8 },

    #[error("truncated file {0}")]
    Truncated(PathBuf),

    #[error("dimension mismatch in {path}: {reason}")]
    Dimension { path: PathBuf, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
