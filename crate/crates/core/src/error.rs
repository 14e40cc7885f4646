use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}: bad magic {found:?}, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{}: truncated: expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("{}:{line}: {message}", path.display())]
    Manifest {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("duplicate bag_id {0:?}")]
    DuplicateId(String),

    #[error("inconsistent dimension: {first} vs {other} (bag {bag_id:?})")]
    InconsistentDimension {
        first: usize,
        other: usize,
        bag_id: String,
    },

    #[error("no bags")]
    NoBags,

    #[error("dim mismatch {expected} vs {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class mismatch: query label {query}, key label {key}")]
    ClassMismatch { query: usize, key: usize },

    #[error("covary requires covariance")]
    MissingCovariance,

    #[error("empty cluster {0}")]
    EmptyCluster(usize),

    #[error("covariance factorization failed at pivot {0}")]
    Factorization(usize),

    #[error("unknown bag_id {0:?}")]
    UnknownBag(String),

    #[error("class {0} has no key bags")]
    MissingClass(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bag {bag_id}: {source}")]
    Bag {
        bag_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// The underlying error with any per-bag context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Bag { source, .. } => source.root(),
            other => other,
        }
    }

    /// The bag an error was raised for, if known.
    pub fn bag_id(&self) -> Option<&str> {
        match self {
            Error::Bag { bag_id, .. } => Some(bag_id),
            _ => None,
        }
    }

    pub(crate) fn in_bag(self, bag_id: &str) -> Self {
        Error::Bag {
            bag_id: bag_id.to_owned(),
            source: Box::new(self),
        }
    }
}
