use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("lookup error: unknown id `{0}`")]
    Lookup(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("orchestration error: {0}")]
    Orchestration(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
