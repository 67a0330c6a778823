use thiserror::Error;

use crate::model::ModelKind;

pub type Result<T> = std::result::Result<T, XaasError>;

#[derive(Debug, Error)]
pub enum XaasError {
    #[error("input has {got} features but the model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("input contains a non-finite value at index {0}")]
    NonFinite(usize),

    #[error("method {method} is not applicable to {kind} models")]
    NotApplicable { method: String, kind: ModelKind },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("exact Shapley enumeration refused for {0} features (limit 12)")]
    TooManyFeatures(usize),

    #[error("invalid model definition: {0}")]
    InvalidModel(String),

    #[error("embedding length mismatch: {0} vs {1}")]
    EmbeddingMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
