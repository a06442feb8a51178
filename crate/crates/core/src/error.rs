use thiserror::Error;

use crate::domain::TaskKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("task {task} requires context field `{field}`")]
    MissingRequiredContext { task: TaskKind, field: &'static str },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("index {index} out of bounds for table `{table}` with {rows} rows")]
    IndexOutOfBounds {
        table: &'static str,
        index: usize,
        rows: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("split `{0}` has no rows")]
    EmptySplit(&'static str),

    #[error("fewer than {k} distinct vectors ({distinct} found)")]
    DegenerateInput { k: usize, distinct: usize },

    #[error("mode `{0}` requires an artifact that was not provided")]
    MissingArtifact(String),

    #[error("feature schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
