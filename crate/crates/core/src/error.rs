use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("crop window lies entirely outside the {width}x{height} depth image")]
    DegenerateCrop { width: usize, height: usize },

    #[error("joint frame mismatch: expected {expected:?}, got {actual:?}")]
    FrameMismatch {
        expected: crate::geometry::JointFrame,
        actual: crate::geometry::JointFrame,
    },

    #[error("projection failed: camera-frame depth {0} mm is not positive")]
    Projection(f64),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("all mask weights are zero")]
    ZeroWeight,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("non-finite loss in batch [{}]", ids.join(", "))]
    NonFinite { ids: Vec<String> },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
