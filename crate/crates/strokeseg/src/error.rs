use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed NIfTI file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported volume shape in {path}: {reason}")]
    UnsupportedShape { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("geometry mismatch: {0}")]
    Alignment(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
