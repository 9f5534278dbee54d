use std::path::Path;

use flim_core::FlimError;
use serde_json::json;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] FlimError),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl ServiceError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.kind(),
            ServiceError::Validation(_) => "ValidationError",
            ServiceError::NotFound(_) => "NotFoundError",
            ServiceError::Conflict(_) => "ConflictError",
            ServiceError::Io { .. } => "IoError",
            ServiceError::Json(_) => "SchemaError",
        }
    }

    /// `{"v": 1, "error": {"kind", "message"}}`
    pub fn to_json(&self) -> serde_json::Value {
        json!({ "v": 1, "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}
