//! Shared error type for the whole pipeline.

use thiserror::Error;

/// Errors surfaced by the hashing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (layer chaining, bad parameter values).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dimension mismatch between values that must agree in shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite or otherwise unusable input values.
    #[error("input error: {0}")]
    Input(String),

    /// An index referenced an item outside its collection.
    #[error("index error: {0}")]
    Index(String),

    /// Malformed file contents; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Optimization produced non-finite values.
    #[error("divergence: {0}")]
    Divergence(String),

    /// An exact identity or verification check failed.
    #[error("verification failed: {0}")]
    Verification(String),

    /// A metric is undefined for the given inputs (e.g. no eligible queries).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

/// Opens a file for reading, tagging I/O errors with the path.
pub(crate) fn open_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub type Result<T> = std::result::Result<T, Error>;
