//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("unknown tap point `{0}`")]
    UnknownTapPoint(String),

    #[error("checkpoint format error at byte offset {offset}: {detail}")]
    CheckpointFormat { offset: u64, detail: String },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("dataset format error at byte offset {offset}: {detail}")]
    DatasetFormat { offset: u64, detail: String },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
