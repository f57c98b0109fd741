use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

/// Startup and persistence failures.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rqa_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Errors reported to HTTP clients.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no retriever checkpoint is loaded")]
    ModelNotLoaded,
    #[error("unknown request {0:?}")]
    UnknownRequest(String),
    #[error("request {0:?} has expired")]
    RequestExpired(String),
    #[error("passage {passage_id:?} was not served in request {request_id:?}")]
    UnservedPassage { request_id: String, passage_id: String },
    #[error("rating is required")]
    MissingRating,
    #[error("unknown rating {0:?}")]
    UnknownRating(String),
    #[error("explanation is required")]
    MissingExplanation,
    #[error("feedback for this card was already submitted")]
    DuplicateSubmission,
    #[error("retraining job {0} is still running")]
    JobAlreadyRunning(String),
    #[error("no feedback has been collected yet")]
    NoFeedbackYet,
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        use ApiError::*;
        match self {
            UnknownDomain(_) | EmptyQuestion | BadRequest(_) => StatusCode::BAD_REQUEST,
            ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            UnknownRequest(_) | UnknownJob(_) => StatusCode::NOT_FOUND,
            RequestExpired(_) => StatusCode::GONE,
            UnservedPassage { .. } | MissingRating | UnknownRating(_) | MissingExplanation | NoFeedbackYet => StatusCode::UNPROCESSABLE_ENTITY,
            DuplicateSubmission | JobAlreadyRunning(_) => StatusCode::CONFLICT,
            Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        use ApiError::*;
        match self {
            UnknownDomain(_) => "UnknownDomain",
            EmptyQuestion => "EmptyQuestion",
            ModelNotLoaded => "ModelNotLoaded",
            UnknownRequest(_) => "UnknownRequest",
            RequestExpired(_) => "RequestExpired",
            UnservedPassage { .. } => "UnservedPassage",
            MissingRating => "MissingRating",
            UnknownRating(_) => "UnknownRating",
            MissingExplanation => "MissingExplanation",
            DuplicateSubmission => "DuplicateSubmission",
            JobAlreadyRunning(_) => "JobAlreadyRunning",
            NoFeedbackYet => "NoFeedbackYet",
            UnknownJob(_) => "UnknownJob",
            BadRequest(_) => "BadRequest",
            Internal(_) => "Internal",
        }
    }
}

impl From<rqa_core::Error> for ApiError {
    fn from(e: rqa_core::Error) -> Self {
        match e {
            rqa_core::Error::UnknownDomain(d) => ApiError::UnknownDomain(d),
            rqa_core::Error::EmptyText => ApiError::EmptyQuestion,
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = Json(json!({ "error": self.code(), "message": self.to_string() }));
        (self.status(), body).into_response()
    }
}
