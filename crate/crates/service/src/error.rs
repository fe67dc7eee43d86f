use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use thiserror::Error;

use crate::api::ErrorBody;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{message}")]
    BadRequest { message: String, line: Option<usize> },

    #[error("session {0} not found")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("surrogate fit failed: {0}")]
    FitFailed(String),

    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::BadRequest { message: message.into(), line: None }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest { .. } => StatusCode::BAD_REQUEST,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::FitFailed(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::BadRequest { .. } => "bad_request",
            Self::NotFound(_) => "not_found",
            Self::Conflict(_) => "conflict",
            Self::FitFailed(_) => "fit_failed",
            Self::Internal(_) => "internal",
        }
    }
}

/// Input problems become 400s with the offending line when known; anything
/// else is a server fault.
impl From<nestpref::Error> for ApiError {
    fn from(e: nestpref::Error) -> Self {
        use nestpref::Error as E;
        match e {
            E::Parse { line, .. } | E::Validation { line, .. } => {
                Self::BadRequest { message: e.to_string(), line: (line > 0).then_some(line) }
            }
            E::Csv(ref c) => Self::BadRequest { message: e.to_string(), line: c.position().map(|p| p.line() as usize) },
            E::Config(_) | E::InvalidParameter(_) | E::Domain(_) | E::Json(_) => Self::bad_request(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(format!("storage: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if matches!(self, Self::Internal(_) | Self::FitFailed(_)) {
            tracing::error!("{self}");
        }
        let line = match &self {
            Self::BadRequest { line, .. } => *line,
            _ => None,
        };
        let body = ErrorBody { error: self.kind().into(), message: self.to_string(), line };
        (self.status(), Json(body)).into_response()
    }
}
