//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("refinement objective became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("training loss became non-finite at step {step}")]
    TrainDiverged { step: usize },

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("scene placement failed: {0}")]
    Placement(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
