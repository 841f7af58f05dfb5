use std::io;

use thiserror::Error;

pub type Result<T, E = ClafError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClafError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("insufficient samples for class {class}: need {needed}, source has {available}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("need at least {needed} evaluation records, have {available}")]
    TooFewRecords { needed: usize, available: usize },

    #[error("non-finite {component} loss at iteration {iter}: {value}")]
    NonFiniteLoss {
        component: &'static str,
        iter: usize,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint was written with {stored}, sidecar hashes to {actual}")]
    ConfigMismatch { stored: String, actual: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ClafError {
    /// Validation failures are caller mistakes (bad config, wrong shapes); the
    /// rest are runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ClafError::InvalidSpec(_)
                | ClafError::ShapeMismatch { .. }
                | ClafError::ClassOutOfRange { .. }
                | ClafError::Config(_)
                | ClafError::ConfigMismatch { .. }
                | ClafError::InsufficientSamples { .. }
        )
    }
}
