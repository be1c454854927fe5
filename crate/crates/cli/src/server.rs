//! HTTP API over a directory of runs, for the review console.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/runs` | |
//! | GET | `/runs/{id}` | |
//! | GET | `/runs/{id}/queue` | `?page=0&page_size=20` |
//! | POST | `/runs/{id}/reviews` | `{"item_id", "label", "reviewer"}` |
//! | GET | `/runs/{id}/export` | |
//! | GET | `/items/{id}/content` | `?run=<id>` |
//!
//! Errors are `{"error": "...", "kind": "..."}` with a matching status code.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use act_core::data::{CorrectedEntry, ItemContent};
use act_core::pipeline::{self, PipelineError, Run, RunMetrics};
use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

/// Shared server state. The server is the only writer for the runs it has opened.
pub struct AppState {
    runs_dir: PathBuf,
    open: Mutex<HashMap<String, Arc<RwLock<Run>>>>,
}

impl AppState {
    pub fn new(runs_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            runs_dir: runs_dir.into(),
            open: Mutex::new(HashMap::new()),
        })
    }

    /// Cached handle for one run; each run has its own lock so that
    /// submissions to one run are serialized while other runs proceed.
    fn run(&self, id: &str) -> Result<Arc<RwLock<Run>>, ApiError> {
        let mut open = self.open.lock().expect("run cache lock");
        if let Some(run) = open.get(id) {
            return Ok(Arc::clone(run));
        }
        let run = Arc::new(RwLock::new(Run::open_id(&self.runs_dir, id)?));
        open.insert(id.to_string(), Arc::clone(&run));
        Ok(run)
    }
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, kind) = match &e {
            PipelineError::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
            PipelineError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            PipelineError::Stage { .. } => (StatusCode::CONFLICT, "stage"),
            PipelineError::NotPending(_) => (StatusCode::UNPROCESSABLE_ENTITY, "not_pending"),
            PipelineError::Data(_) | PipelineError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl ApiError {
    fn not_found(message: String) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message,
        }
    }

    fn internal(message: String) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "kind": self.kind });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn list_runs(State(app): State<Arc<AppState>>) -> ApiResult<Response> {
    let runs = blocking(move || Ok(pipeline::list_runs(&app.runs_dir)?)).await?;
    Ok(Json(runs).into_response())
}

async fn run_state(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let state = blocking(move || {
        let run = app.run(&id)?;
        let run = run.read().expect("run lock");
        run.state()
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("run {id} has no state yet")))
    })
    .await?;
    Ok(Json(state).into_response())
}

#[derive(Debug, Deserialize)]
pub struct QueueQuery {
    #[serde(default)]
    page: usize,
    #[serde(default = "default_page_size")]
    page_size: usize,
}

fn default_page_size() -> usize {
    20
}

async fn queue(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<QueueQuery>,
) -> ApiResult<Response> {
    let page = blocking(move || {
        let run = app.run(&id)?;
        {
            let reader = run.read().expect("run lock");
            if !reader.queue_needs_finalize() {
                return Ok(reader.peek_queue(q.page, q.page_size)?);
            }
        }
        let mut writer = run.write().expect("run lock");
        Ok(writer.review_queue(q.page, q.page_size)?)
    })
    .await?;
    Ok(Json(page).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewSubmission {
    pub item_id: usize,
    pub label: usize,
    #[serde(default = "anonymous")]
    pub reviewer: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

async fn submit(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ReviewSubmission>,
) -> ApiResult<Response> {
    let state = blocking(move || {
        let run = app.run(&id)?;
        let mut run = run.write().expect("run lock");
        Ok(run.submit_review(body.item_id, body.label, &body.reviewer)?.clone())
    })
    .await?;
    Ok(Json(state).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportPayload {
    pub metrics: RunMetrics,
    pub corrected: Vec<CorrectedEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_csv: Option<String>,
}

async fn export(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let payload = blocking(move || {
        let run = app.run(&id)?;
        let run = run.write().expect("run lock");
        let bundle = run.export()?;
        let curve_csv = if bundle.curve_written {
            let path = bundle.dir.join("curve.csv");
            Some(std::fs::read_to_string(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?)
        } else {
            None
        };
        Ok(ExportPayload {
            metrics: bundle.metrics,
            corrected: bundle.corrected.entries,
            curve_csv,
        })
    })
    .await?;
    Ok(Json(payload).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ContentQuery {
    run: String,
}

fn content_type(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn content(
    State(app): State<Arc<AppState>>,
    UrlPath(item_id): UrlPath<usize>,
    Query(q): Query<ContentQuery>,
) -> ApiResult<Response> {
    blocking(move || {
        let run = app.run(&q.run)?;
        let run = run.read().expect("run lock");
        let item = run
            .dataset()
            .item(item_id)
            .ok_or_else(|| ApiError::not_found(format!("item {item_id} not in run {}", q.run)))?;
        let image = match &item.content {
            ItemContent::Text { text } => {
                return Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text.clone()).into_response());
            }
            ItemContent::Image { path } | ItemContent::Vqa { image: path, .. } => PathBuf::from(path),
        };
        let resolved = if image.is_relative() {
            let base = run.config().dataset.parent().map(Path::to_path_buf).unwrap_or_default();
            base.join(image)
        } else {
            image
        };
        let bytes = std::fs::read(&resolved)
            .map_err(|e| ApiError::not_found(format!("{}: {e}", resolved.display())))?;
        Ok(([(header::CONTENT_TYPE, content_type(&resolved))], Body::from(bytes)).into_response())
    })
    .await
}

/// Routes over `state`; `static_dir`, when given, is served for all other paths.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(run_state))
        .route("/runs/{id}/queue", get(queue))
        .route("/runs/{id}/reviews", post(submit))
        .route("/runs/{id}/export", get(export))
        .route("/items/{id}/content", get(content))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until interrupted.
pub async fn serve(runs_dir: PathBuf, addr: std::net::SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let app = router(AppState::new(runs_dir), static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
