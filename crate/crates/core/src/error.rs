use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite values produced in {0}")]
    NumericalFailure(String),

    #[error("prototype for class {class_id} (task {task_id}) is finalized and cannot be updated")]
    ImmutablePrototype { class_id: usize, task_id: usize },

    #[error("task {task_id} cannot be finalized: class {class_id} received no embeddings")]
    IncompleteTask { task_id: usize, class_id: usize },

    #[error("prototype store has no finalized old classes")]
    EmptyStore,

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("failed to ingest dataset from {path}: {message}")]
    Ingestion { path: String, message: String },

    #[error("config error at key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("missing checkpoint for task {task} ({path})")]
    MissingCheckpoint { task: usize, path: PathBuf },

    #[error("unknown image id {0}")]
    UnknownImage(usize),

    #[error("unknown ablation axis `{0}` (expected one of pks_on_off, pr_on_off, weight_mode, components)")]
    UnknownAxis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
