use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot infer a task: request has no query, source entity or user")]
    Unroutable,

    #[error("{0}")]
    InvalidRequest(String),

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("no model loaded")]
    NoModel,

    #[error("feature schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("cannot load checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::Unroutable => "unroutable",
            ServeError::InvalidRequest(_) => "invalid_request",
            ServeError::UnknownEntity(_) => "unknown_entity",
            ServeError::NoModel => "no_model",
            ServeError::SchemaMismatch { .. } => "schema_mismatch",
            ServeError::InvalidCheckpoint(_) => "invalid_checkpoint",
            ServeError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServeError::NoModel => 503,
            ServeError::Internal(_) => 500,
            _ => 400,
        }
    }
}

impl From<unirank::Error> for ServeError {
    fn from(e: unirank::Error) -> Self {
        use unirank::Error as E;
        match e {
            E::UnknownEntity(id) => ServeError::UnknownEntity(id),
            E::MissingRequiredContext { .. } | E::InvalidValue(_) => ServeError::InvalidRequest(e.to_string()),
            E::SchemaMismatch { expected, found } => ServeError::SchemaMismatch { expected, found },
            other => ServeError::Internal(other.to_string()),
        }
    }
}
