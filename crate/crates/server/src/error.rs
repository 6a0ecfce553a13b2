use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pharmafind_core::BrokerError;
use serde_json::json;
use thiserror::Error;

/// Every failure an endpoint can report. Rendered as `{"error": code, "message": text}`.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Broker(e) => match e {
                BrokerError::UnknownMedicine(_)
                | BrokerError::InvalidPrescription(_)
                | BrokerError::InvalidLocation(_)
                | BrokerError::InvalidConfig(_)
                | BrokerError::InvalidResponse(_) => StatusCode::BAD_REQUEST,
                BrokerError::NotFound(_) => StatusCode::NOT_FOUND,
                BrokerError::Forbidden(_) => StatusCode::FORBIDDEN,
                BrokerError::Conflict(_) => StatusCode::CONFLICT,
                BrokerError::Registry(_) | BrokerError::Store(_) | BrokerError::Engine(_) => {
                    StatusCode::INTERNAL_SERVER_ERROR
                }
            },
        }
    }

    fn code(status: StatusCode) -> &'static str {
        match status {
            StatusCode::BAD_REQUEST => "bad_request",
            StatusCode::UNAUTHORIZED => "unauthorized",
            StatusCode::FORBIDDEN => "forbidden",
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            _ => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = json!({ "error": Self::code(status), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}
