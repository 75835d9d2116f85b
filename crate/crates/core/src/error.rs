//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("quality gate failed for {model_id}: {reason}")]
    GateFailure { model_id: String, reason: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("stage {stage} failed for {item}: {source}")]
    Stage {
        stage: String,
        item: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage and the item (model id, file)
    /// that was being processed when it occurred.
    pub fn in_stage(self, stage: &str, item: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            item: item.to_string(),
            source: Box::new(self),
        }
    }
}
