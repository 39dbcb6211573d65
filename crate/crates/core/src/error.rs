use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record in an input file is malformed or violates a data invariant.
    #[error("{file}:{line}: {message}")]
    Record {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged during {stage} (epoch {epoch}): {detail}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("unknown student `{0}`")]
    UnknownStudent(String),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("{0}")]
    Precondition(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// True for numeric failures (divergence, NaN/inf); the CLI maps these to their own exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
