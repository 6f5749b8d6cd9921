use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("session has used all {0} interventions of its last task")]
    LimitReached(usize),

    #[error("session was created without a lens")]
    LensDisabled,

    #[error("{0}")]
    BadRequest(String),

    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::LimitReached(_) => StatusCode::CONFLICT,
            ApiError::LensDisabled | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<blicket_core::Error> for ApiError {
    fn from(e: blicket_core::Error) -> Self {
        use blicket_core::Error;
        match e {
            Error::LimitReached { limit } => ApiError::LimitReached(limit),
            Error::Io(_) | Error::DegenerateEvidence(_) => ApiError::Internal(e.to_string()),
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
