//! HTTP front end for an [`AnnotationStore`].
//!
//! Routes:
//! - `GET  /api/tasks/next?worker=<id>`
//! - `POST /api/annotations`
//! - `GET  /api/progress`
//! - `GET  /api/groundtruth`
//! - `GET  /api/summary`
//!
//! Anything else is served from the UI directory when one is configured.

use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sitqa_core::annotation::{AnnotationError, AnnotationStore, Task};
use sitqa_core::evaluation::AnswerValue;
use tower_http::services::ServeDir;

pub type SharedStore = Arc<RwLock<AnnotationStore>>;

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub worker: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextTaskResponse {
    pub task: Option<Task>,
    /// Annotations this worker has submitted.
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub task_id: String,
    pub response: AnswerValue,
    #[serde(default)]
    pub timestamp: Option<String>,
}

pub struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let (status, code) = match &e {
            AnnotationError::DuplicateAnnotation { .. } => {
                (StatusCode::CONFLICT, "duplicate_annotation")
            }
            AnnotationError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            AnnotationError::TaskComplete(_) => (StatusCode::CONFLICT, "task_complete"),
            AnnotationError::ModeMismatch { .. } => (StatusCode::BAD_REQUEST, "mode_mismatch"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, code, e.to_string())
    }
}

fn poisoned() -> ApiError {
    ApiError(
        StatusCode::INTERNAL_SERVER_ERROR,
        "internal",
        "store lock poisoned".into(),
    )
}

async fn next_task(
    State(store): State<SharedStore>,
    Query(q): Query<NextQuery>,
) -> Result<Json<NextTaskResponse>, ApiError> {
    let worker = q.worker.filter(|w| !w.trim().is_empty()).ok_or_else(|| {
        ApiError(
            StatusCode::BAD_REQUEST,
            "missing_worker",
            "worker query parameter is required".into(),
        )
    })?;
    let store = store.read().map_err(|_| poisoned())?;
    Ok(Json(NextTaskResponse {
        task: store.next_task(&worker).cloned(),
        done: store
            .records()
            .iter()
            .filter(|r| r.worker_id == worker)
            .count(),
        total: store.tasks().count(),
    }))
}

async fn submit(
    State(store): State<SharedStore>,
    Json(s): Json<Submission>,
) -> Result<Json<sitqa_core::annotation::Ack>, ApiError> {
    if s.worker_id.trim().is_empty() {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            "missing_worker",
            "worker_id is empty".into(),
        ));
    }
    let timestamp = s
        .timestamp
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339());
    let mut store = store.write().map_err(|_| poisoned())?;
    let ack = store.submit(&s.worker_id, &s.task_id, s.response, timestamp)?;
    log::info!(
        "{} annotated {} ({}/{})",
        s.worker_id,
        ack.task_id,
        ack.count,
        store.config().annotators_per_task
    );
    Ok(Json(ack))
}

async fn progress(State(store): State<SharedStore>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(store.read().map_err(|_| poisoned())?.progress()))
}

async fn groundtruth(State(store): State<SharedStore>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(
        store.read().map_err(|_| poisoned())?.export_ground_truth(),
    ))
}

async fn summary(State(store): State<SharedStore>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(store.read().map_err(|_| poisoned())?.summary()))
}

pub fn router(store: SharedStore, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/groundtruth", get(groundtruth))
        .route("/api/summary", get(summary))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async {
            (
                StatusCode::NOT_FOUND,
                "no UI bundle configured; the JSON API lives under /api/",
            )
        }),
    }
}

/// Serves until `shutdown` resolves, then returns after in-flight requests
/// finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: SharedStore,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
}
