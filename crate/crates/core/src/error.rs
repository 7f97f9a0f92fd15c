use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("no valid pixels under the mask")]
    EmptyMask,

    #[error("non-positive depth {value} at a valid pixel")]
    NonPositiveDepth { value: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("normalization already applied")]
    AlreadyNormalized,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint does not match network spec: {0}")]
    SpecMismatch(String),

    #[error("batch kind mismatch: expected {expected}, got {found}")]
    BatchKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Coarse classification used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::SpecMismatch(_) => ErrorCategory::Config,
            Error::Data(_)
            | Error::MissingFile(_)
            | Error::EmptyMask
            | Error::NonPositiveDepth { .. }
            | Error::Image(_)
            | Error::Json(_)
            | Error::CheckpointVersion { .. }
            | Error::CheckpointCorrupt(_) => ErrorCategory::Data,
            _ => ErrorCategory::Runtime,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}
