use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorFileError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cost matrix has {rows} rows but {cols} columns; solver needs rows >= cols")]
    TooFewRows { rows: usize, cols: usize },

    #[error("instance {rows}x{cols} exceeds the enumeration budget (rows <= 10, cols <= 7)")]
    EnumerationBudget { rows: usize, cols: usize },

    #[error("points without any admissible pixel: {0:?}")]
    UnmatchedPoints(Vec<usize>),

    #[error("invalid match matrix: {0}")]
    InvalidMatchMatrix(String),

    #[error("decoder does not support {0}")]
    Unsupported(&'static str),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Tensor(#[from] TensorFileError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) => 2,
            Error::NumericFailure(_) => 4,
            _ => 3,
        }
    }

    /// Stable machine-parsable prefix for single-line error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "E_INDEX",
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::InvalidParameter(_) => "E_USAGE",
            Error::TooFewRows { .. } => "E_ROWS",
            Error::EnumerationBudget { .. } => "E_BUDGET",
            Error::UnmatchedPoints(_) => "E_UNMATCHED",
            Error::InvalidMatchMatrix(_) => "E_MATCH",
            Error::Unsupported(_) => "E_UNSUPPORTED",
            Error::NumericFailure(_) => "E_NUMERIC",
            Error::Empty(_) => "E_EMPTY",
            Error::Tensor(_) => "E_TENSOR",
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
        }
    }
}
