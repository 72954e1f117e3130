use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DriftError>;

/// Errors raised across the simulation, learning and inversion pipeline.
#[derive(Debug, Error)]
pub enum DriftError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} h outside the field window [0, {t_max}] h")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical blow-up at step {step}: {what}")]
    NumericalBlowup { step: usize, what: String },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("undefined Liu index: reference trajectory {index} has zero path length")]
    UndefinedLiuIndex { index: usize },

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("format error in {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DriftError {
    pub(crate) fn format(what: &str, reason: impl Into<String>) -> Self {
        DriftError::Format {
            what: what.to_string(),
            reason: reason.into(),
        }
    }
}
