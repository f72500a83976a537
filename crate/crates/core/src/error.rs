use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity {0} is outside (0, 1]")]
    Capacity(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed gradient bundle: {0}")]
    Bundle(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(
        "nesting violated in layer {layer} between capacities {smaller} and {larger}: {} offending coordinates (first {:?})",
        coordinates.len(),
        coordinates.first()
    )]
    Nesting {
        layer: usize,
        smaller: f64,
        larger: f64,
        coordinates: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}
