use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),

    #[error("{message}")]
    Invalid { message: String, valid: Option<Vec<String>> },

    /// The job is not in a state that allows the action.
    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Core(#[from] atelier_core::Error),

    #[error("storage: {0}")]
    Storage(String),
}

impl ServiceError {
    pub fn invalid(message: impl Into<String>) -> Self {
        ServiceError::Invalid {
            message: message.into(),
            valid: None,
        }
    }

    /// Stable machine-readable code used in error envelopes and CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid { .. } => "invalid_argument",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Core(atelier_core::Error::NotFound(_)) => "not_found",
            ServiceError::Core(atelier_core::Error::InvalidArgument(_)) => "invalid_argument",
            ServiceError::Core(_) => "model_error",
            ServiceError::Storage(_) => "storage_error",
        }
    }
}

pub(crate) fn storage(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(e.to_string())
}
