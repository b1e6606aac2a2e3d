use std::io;

use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("invalid noise scale t = {0}; must be > 0")]
    InvalidScale(f64),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical failure at step {step}: {what}")]
    NumericalFailure { step: usize, what: String },

    #[error("training diverged after {steps} SGD steps")]
    TrainingDiverged { steps: usize },

    #[error("singular system: s_min/s_max = {ratio:e}")]
    SingularSystem { ratio: f64 },

    #[error("degenerate classifier: {0}")]
    DegenerateClassifier(String),

    #[error("probe returned a non-finite value at row {row}")]
    ProbeFailure { row: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalFailure { .. }
                | Error::TrainingDiverged { .. }
                | Error::SingularSystem { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
