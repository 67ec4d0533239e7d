use thiserror::Error;

use crate::training::History;

pub type Result<T, E = VindError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VindError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (block {block})")]
    NotPositiveDefinite { block: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("quadrature domain too narrow: tail mass {tail_mass:e} exceeds {limit:e}, widen the domain")]
    WidenDomain { tail_mass: f64, limit: f64 },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        reason: String,
        history: Box<History>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(VindError::Shape(msg.into()))
}
