//! HTTP API.
//!
//! | method | path                     | body / query                         | response            |
//! |--------|--------------------------|--------------------------------------|---------------------|
//! | POST   | `/jobs`                  | `{"text", "seed"?, "overrides"?, "auto"?}` | 201 job       |
//! | GET    | `/jobs/{id}`             |                                      | job                 |
//! | GET    | `/jobs`                  | `?page=1&per_page=20`                | page                |
//! | POST   | `/jobs/{id}/style`       | `{"style", "mode"?, "iters"?}`       | job                 |
//! | POST   | `/jobs/{id}/reshuffle`   |                                      | job                 |
//! | GET    | `/styles`                | `?genre=g&k=3`                       | `{"genre", "styles"}` |
//! | GET    | `/artifacts/{hash}`      |                                      | `image/png`         |
//!
//! Jobs are returned as stored plus an `actions` object. Errors use the
//! envelope `{"error": {"code", "message", "valid"?}}` with 400 for invalid
//! input, 404 for unknown ids, 409 for actions the job's state forbids and
//! 500 otherwise. `POST /jobs` returns at once; a worker advances the job
//! until it awaits a style choice (or, with `auto`, applies the top style).

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::error::ServiceError;
use crate::job::{JobOverrides, JobRequest, PipelineJob, StyleMode};
use crate::pipeline::Pipeline;

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub workers: Arc<Semaphore>,
    pub page_size: usize,
    pub static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, max_concurrent_jobs: usize, page_size: usize) -> Self {
        AppState {
            pipeline,
            workers: Arc::new(Semaphore::new(max_concurrent_jobs.max(1))),
            page_size,
            static_dir: None,
        }
    }
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "invalid_argument" => StatusCode::BAD_REQUEST,
            "conflict" => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = json!({ "code": self.0.code(), "message": self.0.to_string() });
        if let ServiceError::Invalid { valid: Some(v), .. } = &self.0 {
            err["valid"] = json!(v);
        }
        (status, Json(json!({ "error": err }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// A job with the actions its state allows.
pub fn job_json(job: &PipelineJob) -> Value {
    let mut v = serde_json::to_value(job).expect("jobs serialize");
    v["actions"] = serde_json::to_value(job.state.actions()).expect("actions serialize");
    v
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Storage(format!("worker panicked: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
pub struct CreateBody {
    pub text: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub overrides: JobOverrides,
    #[serde(default)]
    pub auto: bool,
}

async fn create_job(
    State(st): State<AppState>,
    body: Result<Json<CreateBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body.map_err(|e| ApiError(ServiceError::invalid(e.body_text())))?;
    let p = st.pipeline.clone();
    let req = JobRequest {
        text: body.text,
        seed: body.seed,
        overrides: body.overrides,
    };
    let job = blocking(move || p.create_job(req)).await?;
    let (p, id, auto, workers) = (st.pipeline.clone(), job.id.clone(), body.auto, st.workers.clone());
    tokio::spawn(async move {
        let Ok(_permit) = workers.acquire_owned().await else { return };
        let res = tokio::task::spawn_blocking(move || run_job(&p, &id, auto)).await;
        if let Ok(Err(e)) = res {
            log::warn!("job worker: {e}");
        }
    });
    Ok((StatusCode::CREATED, Json(job_json(&job))))
}

/// Worker body: advance to the park state, then optionally apply the top
/// recommended style.
pub fn run_job(p: &Pipeline, id: &str, auto: bool) -> Result<PipelineJob, ServiceError> {
    let job = p.run_until_parked(id)?;
    if auto && job.state == crate::job::JobState::AwaitingStyleChoice {
        let top = job.recommended_ids().into_iter().next().expect("parked jobs have recommendations");
        return p.choose_style(id, &top, StyleMode::Feedforward);
    }
    Ok(job)
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(job_json(&st.pipeline.get_job(&id)?)))
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    pub page: Option<usize>,
    pub per_page: Option<usize>,
}

async fn list_jobs(
    State(st): State<AppState>,
    q: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = q.map_err(|e| ApiError(ServiceError::invalid(e.body_text())))?;
    let page = st.pipeline.list_jobs(q.page.unwrap_or(1), q.per_page.unwrap_or(st.page_size))?;
    Ok(Json(json!({
        "jobs": page.jobs.iter().map(job_json).collect::<Vec<_>>(),
        "page": page.page,
        "per_page": page.per_page,
        "total": page.total,
        "total_pages": page.total_pages,
    })))
}

#[derive(Debug, Deserialize)]
pub struct StyleBody {
    pub style: String,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub iters: Option<usize>,
}

async fn choose_style(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<StyleBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body.map_err(|e| ApiError(ServiceError::invalid(e.body_text())))?;
    let mode = match body.mode.as_deref() {
        None | Some("feedforward") => StyleMode::Feedforward,
        Some("optimize") => StyleMode::Optimize {
            iters: body.iters.unwrap_or(100),
        },
        Some(other) => {
            return Err(ApiError(ServiceError::Invalid {
                message: format!("unknown mode {other:?}"),
                valid: Some(vec!["feedforward".into(), "optimize".into()]),
            }))
        }
    };
    let p = st.pipeline.clone();
    let job = blocking(move || p.choose_style(&id, &body.style, mode)).await?;
    Ok(Json(job_json(&job)))
}

async fn reshuffle(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let p = st.pipeline.clone();
    let job = blocking(move || p.reshuffle(&id)).await?;
    Ok(Json(job_json(&job)))
}

#[derive(Debug, Deserialize, Serialize)]
pub struct StylesQuery {
    pub genre: Option<String>,
    pub k: Option<usize>,
}

async fn styles(State(st): State<AppState>, Query(q): Query<StylesQuery>) -> ApiResult<Json<Value>> {
    let genre = q
        .genre
        .filter(|g| !g.is_empty())
        .ok_or_else(|| ApiError(ServiceError::invalid("query parameter genre is required")))?;
    let styles = st.pipeline.preview_styles(&genre, q.k)?;
    Ok(Json(json!({ "genre": genre, "styles": styles })))
}

async fn artifact(State(st): State<AppState>, Path(hash): Path<String>) -> ApiResult<Response> {
    let hash = hash.strip_suffix(".png").unwrap_or(&hash).to_string();
    let bytes = st.pipeline.artifacts.get(&hash)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

async fn static_file(State(st): State<AppState>, path: Option<Path<String>>) -> ApiResult<Response> {
    let dir = st
        .static_dir
        .clone()
        .ok_or_else(|| ApiError(ServiceError::NotFound("no static directory configured".into())))?;
    let rel = path
        .map(|Path(p)| p)
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| "index.html".into());
    if rel.split('/').any(|c| c == ".." || c.is_empty()) {
        return Err(ApiError(ServiceError::invalid("bad static path")));
    }
    let file = dir.join(&rel);
    let bytes = std::fs::read(&file).map_err(|_| ApiError(ServiceError::NotFound(format!("static file {rel}"))))?;
    let mime = match file.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/style", post(choose_style))
        .route("/jobs/{id}/reshuffle", post(reshuffle))
        .route("/styles", get(styles))
        .route("/artifacts/{hash}", get(artifact))
        .route("/ui", get(static_file))
        .route("/ui/{*path}", get(static_file))
        .with_state(state)
}
