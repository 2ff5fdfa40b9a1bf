//! HTTP API over the moderation pipeline and the review queue.
//!
//! Ingest runs the pipeline synchronously, then tops up the review queue from the
//! verdicts of images left under review.

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use modgate_core::catalog::{decode_png, encode_png, CatalogError, CatalogImage, ImageState};
use modgate_core::pipeline::{
    run_pipeline, DetectionVerdict, FaultPlan, PipelineContext, PipelineError, Rejection, RunReport,
};
use modgate_core::review::{ReviewError, ReviewQueue, ReviewTask, ReviewVerdict, TaskStatus};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::sync::Arc;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSettings {
    /// Tasks created per selection call.
    pub budget: usize,
    /// Minimum confidence for a verdict to be sent to review.
    pub floor: f64,
}

impl Default for ReviewSettings {
    fn default() -> Self {
        Self {
            budget: 100,
            floor: 0.5,
        }
    }
}

pub struct AppState {
    pub ctx: PipelineContext,
    pub review: ReviewQueue,
    pub settings: ReviewSettings,
    pub workers: usize,
    // One pipeline run at a time; runs read every Pending image in the catalog.
    run_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(
        ctx: PipelineContext,
        review: ReviewQueue,
        settings: ReviewSettings,
        workers: usize,
    ) -> Self {
        Self {
            ctx,
            review,
            settings,
            workers: workers.max(1),
            run_lock: tokio::sync::Mutex::new(()),
        }
    }

    /// Creates review tasks from all current verdicts, within one budget.
    pub fn select_review_tasks(&self) -> Result<Vec<ReviewTask>, ReviewError> {
        let verdicts: Vec<DetectionVerdict> = self
            .ctx
            .events
            .read(|s| s.verdicts.values().cloned().collect());
        self.review.select(
            &verdicts,
            &self.ctx.catalog,
            self.settings.budget,
            self.settings.floor,
        )
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", post(ingest))
        .route("/images/{id}", get(image_view))
        .route("/images/{id}/raw", get(image_raw))
        .route("/report", get(report))
        .route("/review/tasks", get(list_tasks))
        .route("/review/tasks/{id}/decision", post(decide))
        .route("/review/stats", get(stats))
        .route("/review/labeled", get(labeled))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl ToString) -> Self {
        Self {
            status,
            body: json!({ "error": kind, "message": message.to_string() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::DuplicateId(_) => Self::new(StatusCode::CONFLICT, "duplicate_image", e),
            CatalogError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", e),
            CatalogError::InvalidImage { .. }
            | CatalogError::Format(_)
            | CatalogError::Decode { .. } => Self::new(StatusCode::BAD_REQUEST, "invalid_image", e),
            CatalogError::IllegalTransition { .. } | CatalogError::StateConflict { .. } => {
                Self::new(StatusCode::CONFLICT, "illegal_transition", e)
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Catalog(c) => c.into(),
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "pipeline", e),
        }
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", e),
            ReviewError::DuplicateDecision { ref existing, .. } => {
                let existing = serde_json::to_value(existing).expect("decision serializes");
                let mut err = Self::new(StatusCode::CONFLICT, "duplicate_decision", &e);
                err.body["existing"] = existing;
                err
            }
            ReviewError::Pipeline(p) => p.into(),
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "review", e),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub image_id: String,
    pub category: String,
    pub png_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageView {
    pub image_id: String,
    pub category: String,
    pub state: ImageState,
    pub verdicts: Vec<DetectionVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
    pub raw_url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestResponse {
    pub image: ImageView,
    pub review_tasks: Vec<ReviewTask>,
}

fn image_view_of(state: &AppState, id: &str) -> ApiResult<ImageView> {
    let catalog = &state.ctx.catalog;
    let (Some(category), Some(img_state)) = (catalog.category(id), catalog.state(id)) else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown image id {id}"),
        ));
    };
    let (verdicts, rejection) = state.ctx.events.read(|s| {
        (
            s.verdicts_for(id).cloned().collect(),
            s.rejected.get(id).cloned(),
        )
    });
    Ok(ImageView {
        image_id: id.to_string(),
        category,
        state: img_state,
        verdicts,
        rejection,
        raw_url: format!("/images/{id}/raw"),
    })
}

async fn ingest(
    State(state): State<Arc<AppState>>,
    Json(req): Json<IngestRequest>,
) -> ApiResult<Response> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.png_base64.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_base64", e))?;
    let pixels = decode_png(&bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", e))?;
    state.ctx.catalog.insert(CatalogImage::new(
        req.image_id.clone(),
        pixels,
        req.category,
    ))?;

    let _guard = state.run_lock.lock().await;
    let st = Arc::clone(&state);
    let tasks = tokio::task::spawn_blocking(move || -> ApiResult<Vec<ReviewTask>> {
        run_pipeline(&st.ctx, st.workers, FaultPlan::default())?;
        Ok(st.select_review_tasks()?)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))??;
    let image = image_view_of(&state, &req.image_id)?;
    Ok((
        StatusCode::CREATED,
        Json(IngestResponse {
            image,
            review_tasks: tasks,
        }),
    )
        .into_response())
}

async fn image_view(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ImageView>> {
    image_view_of(&state, &id).map(Json)
}

async fn image_raw(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let pixels = state.ctx.catalog.pixels(&id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown image id {id}"),
        )
    })?;
    let mut out = Vec::new();
    encode_png(&pixels, &mut out)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], out).into_response())
}

async fn report(State(state): State<Arc<AppState>>) -> Json<RunReport> {
    Json(state.ctx.report())
}

#[derive(Debug, Default, Deserialize)]
pub struct TaskQuery {
    /// `open`, `decided` or `all`. Defaults to `open`.
    pub status: Option<String>,
    pub page: Option<usize>,
    pub per_page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskView {
    #[serde(flatten)]
    pub task: ReviewTask,
    pub image_url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskPage {
    pub tasks: Vec<TaskView>,
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
}

async fn list_tasks(
    State(state): State<Arc<AppState>>,
    Query(q): Query<TaskQuery>,
) -> ApiResult<Json<TaskPage>> {
    let status = match q.status.as_deref().unwrap_or("open") {
        "open" => Some(TaskStatus::Open),
        "decided" => Some(TaskStatus::Decided),
        "all" => None,
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_query",
                format!("status must be open, decided or all, got {other:?}"),
            ))
        }
    };
    let per_page = q.per_page.unwrap_or(DEFAULT_PAGE_SIZE);
    if per_page == 0 || per_page > MAX_PAGE_SIZE {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_query",
            format!("per_page must be in 1..={MAX_PAGE_SIZE}"),
        ));
    }
    let page = q.page.unwrap_or(1).max(1);
    let all = state.review.tasks(status);
    let total = all.len();
    let tasks = all
        .into_iter()
        .skip((page - 1).saturating_mul(per_page))
        .take(per_page)
        .map(|task| TaskView {
            image_url: format!("/images/{}/raw", task.image_id),
            task,
        })
        .collect();
    Ok(Json(TaskPage {
        tasks,
        total,
        page,
        per_page,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub verdict: ReviewVerdict,
    pub reviewer_id: String,
}

async fn decide(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    if req.reviewer_id.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "reviewer_id is empty",
        ));
    }
    let out = state.review.submit_decision(
        &id,
        req.verdict,
        &req.reviewer_id,
        &state.ctx.catalog,
        &state.ctx.events,
    )?;
    Ok(Json(json!({
        "task": out.task,
        "image_state": out.image_state,
        "sample": out.sample,
    })))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<modgate_core::review::ReviewStats> {
    Json(state.review.stats())
}

async fn labeled(
    State(state): State<Arc<AppState>>,
) -> Json<Vec<modgate_core::review::LabeledSample>> {
    Json(state.review.labeled())
}
