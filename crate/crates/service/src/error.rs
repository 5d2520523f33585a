use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use retain_core::RetainError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("login already taken")]
    DuplicateLogin,
    #[error("password must be at least {} characters", crate::accounts::MIN_PASSWORD_LEN)]
    WeakPassword,
    #[error("login must be 1-128 characters without whitespace")]
    InvalidLogin,
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("awaiting approval")]
    AwaitingApproval,
    #[error("authentication required")]
    Unauthenticated,
    #[error("session expired; log in again")]
    SessionExpired,
    #[error("invalid or unknown token")]
    InvalidToken,
    #[error("insufficient role")]
    Forbidden,
    #[error("request cap for this token reached; log in again")]
    RequestCap,
    #[error("unknown account `{0}`")]
    UnknownAccount(String),
    #[error("account `{0}` is not pending")]
    AlreadyApproved(String),
    #[error("an administrator already exists")]
    AdminExists,
    #[error("{0}")]
    BadRequest(String),
    #[error("not found")]
    NotFound,
    #[error("method not allowed")]
    MethodNotAllowed,
    #[error("internal error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] RetainError),
}

/// Error body: `{code, message}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn status_and_code(&self) -> (StatusCode, &'static str) {
        use ServiceError::*;
        match self {
            DuplicateLogin | AlreadyApproved(_) | AdminExists => (StatusCode::CONFLICT, "conflict"),
            WeakPassword | InvalidLogin | BadRequest(_) => (StatusCode::BAD_REQUEST, "validation"),
            InvalidCredentials => (StatusCode::UNAUTHORIZED, "invalid_credentials"),
            Unauthenticated | InvalidToken => (StatusCode::UNAUTHORIZED, "unauthenticated"),
            SessionExpired => (StatusCode::UNAUTHORIZED, "session_expired"),
            AwaitingApproval => (StatusCode::FORBIDDEN, "awaiting_approval"),
            Forbidden => (StatusCode::FORBIDDEN, "forbidden"),
            RequestCap => (StatusCode::TOO_MANY_REQUESTS, "request_cap"),
            UnknownAccount(_) | NotFound => (StatusCode::NOT_FOUND, "not_found"),
            MethodNotAllowed => (StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed"),
            Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            Core(e) => core_status(e),
        }
    }
}

fn core_status(e: &RetainError) -> (StatusCode, &'static str) {
    use RetainError::*;
    match e {
        UnknownProject(_) | UnknownModel(_) | UnknownContributor(_) | UnknownTag(_) => {
            (StatusCode::NOT_FOUND, "not_found")
        }
        DuplicateSchedule(_) => (StatusCode::CONFLICT, "conflict"),
        Io { .. } | Json(_) | ModelVersion(_) | Transport { .. } | Auth { .. } | Parse { .. } => {
            (StatusCode::INTERNAL_SERVER_ERROR, "internal")
        }
        _ => (StatusCode::BAD_REQUEST, "validation"),
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody {
            code: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}
