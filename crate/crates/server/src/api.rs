//! HTTP/1.1 JSON API. Binary payloads (ARTV grids, PLY meshes) travel as
//! base64 strings; previews are returned as PNG bodies.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::{STANDARD, URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine;
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use voxdetail::detailizer::DetailizerModel;
use voxdetail::formats::decode_grid;
use voxdetail::meshio::{extract_mesh, ply_bytes, DEFAULT_ISO};
use voxdetail::metrics::{strict_iou, voxelize_density, DEFAULT_THRESHOLD};
use voxdetail::render::{orbit_camera, render_fields, RenderOptions};
use voxdetail::OccupancyGrid;

use crate::jobs::{JobEvent, JobRegistry, SubmitError};
use crate::store::CheckpointStore;

#[derive(Clone, Debug)]
pub struct AppState {
    pub store: Arc<CheckpointStore>,
    pub jobs: Arc<JobRegistry>,
}

impl AppState {
    pub fn new(store: CheckpointStore) -> Self {
        Self {
            store: Arc::new(store),
            jobs: Arc::new(JobRegistry::default()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/detailize", post(detailize))
        .route("/api/train", post(train))
        .route("/api/jobs/{id}", get(job))
        .route("/api/jobs/{id}/events", get(job_events))
        .route("/api/render", get(render))
        .route("/api/checkpoints", get(checkpoints))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn decode_b64(s: &str) -> Option<Vec<u8>> {
    // query strings turn '+' into ' '
    let s = s.trim().replace(' ', "+");
    STANDARD
        .decode(&s)
        .or_else(|_| URL_SAFE.decode(&s))
        .or_else(|_| URL_SAFE_NO_PAD.decode(&s))
        .ok()
}

fn parse_grid(b64: &str) -> ApiResult<OccupancyGrid> {
    let bytes = decode_b64(b64).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "grid is not valid base64"))?;
    decode_grid(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed ARTV: {e}")))
}

fn model_for(state: &AppState, id: &str, grid: &OccupancyGrid) -> ApiResult<Arc<DetailizerModel>> {
    let model = state
        .store
        .get(id)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint {id}")))?;
    let k = model.config().k;
    if grid.dims() != [k; 3] {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("grid dims {:?} do not match checkpoint resolution {k}", grid.dims()),
        ));
    }
    Ok(model)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct DetailizeRequest {
    pub checkpoint_id: String,
    pub grid: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetailizeResponse {
    /// Binary little-endian PLY, base64.
    pub mesh: String,
    /// Forward pass plus extraction, excluding decoding and encoding.
    pub elapsed_ms: f64,
    pub strict_iou_vs_input: f64,
    pub vertices: usize,
    pub triangles: usize,
}

/// Detailizes a grid, meshes it and reports the elapsed time.
pub fn detailize_grid(model: &DetailizerModel, grid: &OccupancyGrid) -> anyhow::Result<DetailizeResponse> {
    let start = Instant::now();
    let shape = model.forward(grid)?;
    let mesh = extract_mesh(&shape, DEFAULT_ISO)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let generated = voxelize_density(&shape.density, DEFAULT_THRESHOLD, grid.dims()[0])?;
    Ok(DetailizeResponse {
        mesh: STANDARD.encode(ply_bytes(&mesh)?),
        elapsed_ms,
        strict_iou_vs_input: strict_iou(grid, &generated)?,
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
    })
}

async fn detailize(State(state): State<AppState>, Json(req): Json<DetailizeRequest>) -> ApiResult<Json<DetailizeResponse>> {
    let grid = parse_grid(&req.grid)?;
    let model = model_for(&state, &req.checkpoint_id, &grid)?;
    blocking(move || Ok(detailize_grid(&model, &grid)?)).await.map(Json)
}

#[derive(Debug, Deserialize)]
pub struct TrainRequest {
    /// Flat `key = value` training config.
    pub config: String,
    /// Loss event cadence in iterations (default 1).
    pub event_every: Option<usize>,
}

async fn train(State(state): State<AppState>, Json(req): Json<TrainRequest>) -> ApiResult<Response> {
    let jobs = state.jobs.clone();
    let store = state.store.clone();
    let submitted = blocking(move || Ok(jobs.submit(&req.config, req.event_every.unwrap_or(1), store))).await?;
    match submitted {
        Ok(id) => Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()),
        Err(SubmitError::Busy(id)) => Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} is still running"))),
        Err(SubmitError::Invalid(m)) => Err(ApiError::new(StatusCode::BAD_REQUEST, m)),
    }
}

fn find_job(state: &AppState, id: u64) -> ApiResult<Arc<crate::jobs::Job>> {
    state
        .jobs
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

async fn job(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<crate::jobs::JobRecord>> {
    Ok(Json(find_job(&state, id)?.record()))
}

/// Replays the job's events from the start, then follows new ones until the
/// terminal `done` or `failed` event has been sent.
async fn job_events(
    State(state): State<AppState>,
    Path(id): Path<u64>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let job = find_job(&state, id)?;
    let rx = job.subscribe();
    let stream = stream::unfold((job, rx, 0usize, false), |(job, mut rx, next, finished)| async move {
        if finished {
            return None;
        }
        loop {
            let (batch, _) = job.events_since(next);
            if !batch.is_empty() {
                let terminal = batch.iter().any(|e| !matches!(e, JobEvent::Loss(_)));
                let events: Vec<Result<Event, Infallible>> = batch
                    .iter()
                    .map(|e| Ok(Event::default().event(event_name(e)).json_data(e).expect("events serialize")))
                    .collect();
                let next = next + batch.len();
                return Some((stream::iter(events), (job, rx, next, terminal)));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(stream.flatten()).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

fn event_name(e: &JobEvent) -> &'static str {
    match e {
        JobEvent::Loss(_) => "loss",
        JobEvent::Done { .. } => "done",
        JobEvent::Failed { .. } => "failed",
    }
}

#[derive(Debug, Deserialize)]
pub struct RenderQuery {
    pub checkpoint: String,
    pub grid: String,
    #[serde(default)]
    pub azimuth: f32,
    #[serde(default = "default_elevation")]
    pub elevation: f32,
    #[serde(default = "default_fov")]
    pub fov: f32,
    #[serde(default = "default_radius")]
    pub radius: f32,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_elevation() -> f32 {
    20.0
}
fn default_fov() -> f32 {
    45.0
}
fn default_radius() -> f32 {
    2.0
}
fn default_size() -> usize {
    128
}

/// Largest preview side.
pub const MAX_PREVIEW: usize = 1024;

async fn render(State(state): State<AppState>, Query(q): Query<RenderQuery>) -> ApiResult<Response> {
    let grid = parse_grid(&q.grid)?;
    if q.size == 0 || q.size > MAX_PREVIEW {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("size must be in 1..={MAX_PREVIEW}")));
    }
    let cam = orbit_camera(q.azimuth, q.elevation, q.radius, q.fov, q.size, q.size)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let model = model_for(&state, &q.checkpoint, &grid)?;
    let png = blocking(move || {
        let shape = model.forward(&grid).map_err(anyhow::Error::from)?;
        let opts = RenderOptions::for_resolution(model.config().fine);
        let view = render_fields(&shape.density, &shape.albedo, &cam, &opts).map_err(anyhow::Error::from)?;
        Ok(view.to_png().map_err(anyhow::Error::from)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn checkpoints(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store.clone();
    let list = blocking(move || Ok(store.list()?)).await?;
    Ok(Json(json!({ "checkpoints": list })))
}
