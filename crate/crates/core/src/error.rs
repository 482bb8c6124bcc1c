use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("line {line}: atom index out of range ({index} >= {count})")]
    AtomIndexOutOfRange {
        line: usize,
        index: usize,
        count: usize,
    },

    #[error("line {line}: duplicate molecule id '{id}'")]
    DuplicateId { line: usize, id: String },

    #[error("invalid molecule '{id}': {message}")]
    InvalidMolecule { id: String, message: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient of parameter '{0}' contains NaN")]
    NanGradient(String),

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
