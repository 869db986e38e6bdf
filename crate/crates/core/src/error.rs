use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Invalid hyperparameter or model configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. running backward twice on one tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a contract (unknown ids, out-of-range tokens, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not follow its expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values or undefined quantities (zero-norm rows, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Shape(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
