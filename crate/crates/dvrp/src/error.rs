//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the optimization lab.
#[derive(Debug, Error)]
pub enum DvrpError {
    /// An expression was evaluated outside its mathematical domain
    /// (logarithm of a non-positive value, division by zero).
    #[error("domain error: {0}")]
    Domain(String),

    /// Noise intensity outside the valid range.
    #[error("invalid beta {0}: must lie in [0, 1]")]
    InvalidBeta(f64),

    /// Two sequences that must be aligned have different lengths.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Requested task generator does not exist.
    #[error("unknown generator: {0}")]
    UnknownGenerator(String),

    /// Every rollout group was filtered out before the update step.
    #[error("empty batch: all rollout groups were filtered")]
    EmptyBatch,

    /// Training produced a non-finite loss; state was dumped for inspection.
    #[error("non-finite loss at step {step} ({detail})")]
    NonFinite { step: usize, detail: String },

    /// A serialized artifact (checkpoint, grid, dataset, config) is malformed.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DvrpError>;
