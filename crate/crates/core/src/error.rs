use pocon_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("more tasks than classes ({tasks} tasks, {classes} classes)")]
    TooManyTasks { tasks: usize, classes: usize },
    #[error("CopyOP requires homogeneous architectures; use D2eOP")]
    Heterogeneous,
    #[error("non-finite loss in {stage} at step {step} (lr {lr}, batch {batch})")]
    NonFinite { stage: String, step: usize, lr: f64, batch: usize },
    #[error("frozen network `{0}` changed during training")]
    FreezeViolation(String),
    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<CoreError>,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn in_task(self, task: usize) -> Self {
        match self {
            e @ CoreError::Task { .. } => e,
            e => CoreError::Task { task, source: Box::new(e) },
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
