use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape was created without gradient recording")]
    NotRecording,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("line count mismatch: {src_path} has {src} lines, {tgt_path} has {tgt}")]
    LineCountMismatch { src_path: PathBuf, src: usize, tgt_path: PathBuf, tgt: usize },

    #[error("feature pack: {0}")]
    FeatureFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
