use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use deform_core::fitting::FitError;
use deform_core::model::ModelError;
use deform_core::netcore::NetError;
use deform_core::semantics::SemanticError;
use serde_json::json;

/// Error response: status code plus a JSON `{"error": ...}` body.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Net(n) => n.into(),
            ModelError::Shape(_) | ModelError::LatentOutOfRange { .. } | ModelError::Mesh(_) => {
                Self::bad_request(e.to_string())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl From<NetError> for ApiError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite { .. } => Self::numerical(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl From<FitError> for ApiError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Model(m) => m.into(),
            FitError::Net(n) => n.into(),
            FitError::Degenerate => Self::numerical(e.to_string()),
            FitError::TooFewPoints { .. }
            | FitError::VertexOutOfRange { .. }
            | FitError::NonFinite(_)
            | FitError::LatentDim { .. } => Self::bad_request(e.to_string()),
        }
    }
}

impl From<SemanticError> for ApiError {
    fn from(e: SemanticError) -> Self {
        Self::bad_request(e.to_string())
    }
}
