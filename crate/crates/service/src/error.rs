use thiserror::Error;
use xaas_core::XaasError;

use crate::protocol::{ErrorCode, WireError};

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error("model {0:?} is already registered")]
    DuplicateModel(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error(transparent)]
    Core(#[from] XaasError),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ServiceError::UnknownModel(_) => ErrorCode::UnknownModel,
            ServiceError::DuplicateModel(_) => ErrorCode::DuplicateModel,
            ServiceError::InvalidRequest(_) => ErrorCode::InvalidRequest,
            ServiceError::Malformed(_) => ErrorCode::Malformed,
            ServiceError::Core(XaasError::DimensionMismatch { .. } | XaasError::NonFinite(_)) => {
                ErrorCode::InvalidRequest
            }
            ServiceError::Core(XaasError::InvalidModel(_)) => ErrorCode::InvalidRequest,
            ServiceError::Core(_) | ServiceError::Internal(_) => ErrorCode::Internal,
        }
    }

    pub fn to_wire(&self, request_id: Option<String>) -> WireError {
        WireError::new(request_id, self.code(), self.to_string())
    }
}
