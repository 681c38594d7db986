use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at voxel (z={z}, y={y}, x={x}), channel {channel}")]
    NonFinite {
        value: f64,
        z: usize,
        y: usize,
        x: usize,
        channel: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} at voxel index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        label: usize,
        index: usize,
        num_classes: usize,
    },

    #[error("input dims {dims:?} must be divisible by {multiple}; pad to {padded:?}")]
    NotDivisible {
        dims: [usize; 3],
        multiple: usize,
        padded: [usize; 3],
    },

    #[error("non-finite loss term `{term}` ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("training diverged at iteration {iter}: non-finite {term}; breakdown {breakdown}")]
    Diverged {
        iter: u64,
        term: String,
        breakdown: String,
    },

    #[error("{path}: {message} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
