use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called twice on the same graph without reset")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value in tensor #{index} produced by `{op}`")]
    NonFinite { index: usize, op: String },

    #[error("{path}: malformed file at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("pupil not found")]
    PupilNotFound,

    #[error("iris boundary not found")]
    IrisNotFound,

    #[error("training data contains a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("subject overlap between splits: {0:?}")]
    SubjectOverlap(Vec<String>),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
