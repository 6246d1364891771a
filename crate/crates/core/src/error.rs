use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions disagree with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data or configuration is out of its valid range.
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an API contract (missing domain code, wrong norm kind,
    /// mismatched checkpoint fingerprints).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A statistic could not be floored to a positive value.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its content does not parse.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Validation(_) | Error::Corrupt { .. } => 1,
            Error::Contract(_) | Error::Numeric(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}
