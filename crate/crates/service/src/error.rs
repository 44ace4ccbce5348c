use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use evident_core::annotation::ProtocolError;
use serde_json::json;
use thiserror::Error;

use crate::store::StoreError;

/// Request failure, mapped onto a status code with a JSON `{"error": ..}` body.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    /// Valid request that the current protocol stage does not allow.
    #[error("{0}")]
    Conflict(String),
    /// Malformed body, header or parameter.
    #[error("{0}")]
    Invalid(String),
    /// The session belongs to another annotator.
    #[error("{0}")]
    Forbidden(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Conflict(m) => ApiError::Conflict(m),
            ProtocolError::Invalid(m) => ApiError::Invalid(m),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}
