use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("non-finite loss at epoch {}, iteration {}: {:?}", .0.epoch, .0.iteration, .0.breakdown)]
    NonFiniteLoss(Box<Diagnostic>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// State captured when adaptation aborts on a non-finite objective.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Diagnostic {
    pub epoch: usize,
    pub iteration: usize,
    pub batch_indices: Vec<usize>,
    pub breakdown: LossBreakdown,
    /// Checkpoint text of the model right before the failing step.
    pub checkpoint: String,
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
