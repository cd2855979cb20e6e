use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("the other text box is frozen")]
    Frozen,
    #[error("{0}")]
    BadRequest(String),
    #[error("no model loaded")]
    NotLoaded,
    #[error("the model produced an empty synchronization")]
    EmptyDecode,
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] bisync_core::Error),
}

/// JSON body of every error response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: String,
    pub error: String,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Frozen => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::EmptyDecode | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            // Malformed input caught by the core library (unknown
            // language, empty text, ...) is the client's fault.
            ApiError::Core(e) => match e {
                bisync_core::Error::Io(_) | bisync_core::Error::Json(_) | bisync_core::Error::NonFinite(_) => {
                    StatusCode::INTERNAL_SERVER_ERROR
                }
                _ => StatusCode::BAD_REQUEST,
            },
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Frozen => "frozen",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::NotLoaded => "model_not_loaded",
            ApiError::EmptyDecode => "empty_decode",
            ApiError::Internal(_) => "internal",
            ApiError::Core(_) => match self.status() {
                StatusCode::BAD_REQUEST => "bad_request",
                _ => "internal",
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { status: self.code().to_string(), error: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
