use thiserror::Error;

use crate::report_nlp::EntityId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("report {0} has no positive entity")]
    NotEligible(String),

    #[error("no single-entity report available for hard negative of {0}")]
    PoolExhausted(String),

    #[error("precondition violated: {entity} still present in report")]
    EntityStillPresent { entity: EntityId },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("non-finite loss at step {step} (samples {sample_ids:?})")]
    NonFiniteLoss { step: usize, sample_ids: Vec<String> },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
