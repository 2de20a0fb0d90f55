use thiserror::Error;

/// Errors produced anywhere in the attestation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("trace contains no steps")]
    EmptyTrace,

    #[error("write error: {0}")]
    Write(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid attack spec: {0}")]
    Spec(String),

    #[error("no valid DOP splice found after {attempts} attempts")]
    NoDopSplice { attempts: usize },

    #[error("model error: {0}")]
    Model(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("empty point set")]
    EmptySet,

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("workload error: {0}")]
    Workload(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
