use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("position {position} exceeds max_position {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("position {position} does not follow memory (next free position is {next})")]
    PositionOrder { position: usize, next: usize },

    #[error("layer count mismatch: expected {expected}, got {actual}")]
    LayerMismatch { expected: usize, actual: usize },

    #[error("token id {token} out of range for vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },

    #[error("training loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error("invalid selection for layer {layer}: {reason}")]
    Selection { layer: usize, reason: String },

    #[error("memory concat would interleave positions at layer {layer}")]
    Interleave { layer: usize },

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("invalid retention policy: {0}")]
    Policy(String),

    #[error("chunk planning failed: {0}")]
    Plan(String),

    #[error("invalid task spec: {0}")]
    Task(String),

    #[error("invalid baseline spec: {0}")]
    Baseline(String),

    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },

    #[error("container format: {0}")]
    Format(String),

    #[error("schema mismatch in {path}: expected {expected}, found {found}")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
