use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at line {line}: {reason}")]
    Data { line: usize, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(line: usize, reason: impl Into<String>) -> Self {
        Error::Data {
            line,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
