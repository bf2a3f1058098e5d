use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid record {patient_id}: visit {visit_index}: {reason}")]
    InvalidRecord {
        patient_id: String,
        visit_index: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "training diverged at epoch {epoch}, batch {batch}: loss={loss}; parameter norms: {norms}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        norms: String,
    },

    #[error("scaler has not been fitted")]
    UnfittedScaler,

    #[error("missing embedding for patient {patient_id}, visit {visit_index}")]
    MissingEmbedding {
        patient_id: String,
        visit_index: usize,
    },

    #[error("label count mismatch: model predicts {model}, data has {data}")]
    LabelMismatch { model: usize, data: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidRecord { .. }
            | Error::Config(_)
            | Error::Shape { .. }
            | Error::UnfittedScaler
            | Error::MissingEmbedding { .. }
            | Error::LabelMismatch { .. }
            | Error::Empty(_)
            | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}
