//! HTTP API for interactive sessions.
//!
//! Every session has an operation lock: segment, refine and scribble edits
//! take it with `try_lock` and answer 409 while another one is in flight.
//! Slice rendering and downloads only read the session. Inference runs on
//! the blocking pool behind a global worker semaphore.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medalseg_core::pipeline::{self, ClassEntry, PipelineConfig, PromptMode, PromptRequest, RunReport, Stages};
use medalseg_core::volume::nifti_io;
use medalseg_core::{Dims, Modality, Spacing};
use serde::{Deserialize, Serialize};
use tokio::sync::{OwnedMutexGuard, Semaphore};

use crate::error::ApiError;
use crate::render::{render_png, Overlay, SlicePlane, SliceSources};
use crate::session::{labels_sha256, valid_id, ScribbleStroke, Session, SessionInfo};
use crate::{Kit, PromptInput};

pub const DATA_DIR_ENV: &str = "MEDALSEG_DATA_DIR";

pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub pipeline: PipelineConfig,
}

struct Slot {
    op: Arc<tokio::sync::Mutex<()>>,
    session: RwLock<Session>,
}

struct Inner {
    data_dir: PathBuf,
    pipeline: PipelineConfig,
    kit: Kit,
    workers: Arc<Semaphore>,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

type ApiResult<T> = Result<T, ApiError>;

fn poisoned<T>(_: T) -> ApiError {
    ApiError::internal("session lock poisoned")
}

impl AppState {
    pub fn new(config: ServerConfig, kit: Kit) -> anyhow::Result<Self> {
        config.pipeline.validate()?;
        anyhow::ensure!(config.workers > 0, "need at least one worker");
        std::fs::create_dir_all(&config.data_dir)?;
        Ok(Self(Arc::new(Inner {
            data_dir: config.data_dir,
            pipeline: config.pipeline,
            kit,
            workers: Arc::new(Semaphore::new(config.workers)),
            slots: Mutex::new(HashMap::new()),
        })))
    }

    /// Loaded sessions, loading from disk on first use.
    async fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        if !valid_id(id) {
            return Err(ApiError::not_found(format!("no session {id:?}")));
        }
        if let Some(s) = self.0.slots.lock().map_err(poisoned)?.get(id) {
            return Ok(s.clone());
        }
        let dir = self.0.data_dir.join(id);
        if !dir.join("state.json").is_file() {
            return Err(ApiError::not_found(format!("no session {id:?}")));
        }
        let inner = self.0.clone();
        let session = blocking(move || Session::load(dir, &inner.kit, &inner.pipeline)).await?;
        let slot = Arc::new(Slot { op: Arc::default(), session: RwLock::new(session) });
        Ok(self.0.slots.lock().map_err(poisoned)?.entry(id.to_string()).or_insert(slot).clone())
    }

    /// Takes a session's operation lock the way a mutating request would;
    /// while the guard lives, mutating requests on that session get 409.
    pub async fn hold(&self, id: &str) -> ApiResult<OwnedMutexGuard<()>> {
        let slot = self.slot(id).await?;
        slot.op.clone().try_lock_owned().map_err(|_| ApiError::busy())
    }

    async fn run<T: Send + 'static>(&self, f: impl FnOnce(&Inner) -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
        let _permit = self.0.workers.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let inner = self.0.clone();
        blocking(move || f(&inner)).await
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn try_op(slot: &Slot) -> ApiResult<OwnedMutexGuard<()>> {
    slot.op.clone().try_lock_owned().map_err(|_| ApiError::busy())
}

fn busy(slot: &Slot) -> bool {
    slot.op.try_lock().is_err()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/segment", post(segment))
        .route("/sessions/{id}/scribbles", post(add_scribble).delete(clear_scribbles))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}/slice", get(slice))
        .route("/sessions/{id}/result", get(result))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateFromPath {
    path: PathBuf,
    #[serde(default)]
    modality: Option<Modality>,
}

#[derive(Deserialize)]
struct CreateQuery {
    modality: Option<Modality>,
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub modality: Modality,
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

/// A JSON body `{"path", "modality"}` naming a NIfTI file on the server, or
/// the NIfTI bytes themselves with `?modality=`.
async fn create_session(
    State(state): State<AppState>,
    Query(q): Query<CreateQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let id = uuid::Uuid::new_v4().to_string();
    let dir = state.0.data_dir.join(&id);
    let json = is_json(&headers);
    let session = state
        .run(move |inner| {
            let volume = if json {
                let req: CreateFromPath =
                    serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?;
                let modality = req.modality.or(q.modality).unwrap_or(Modality::CT);
                if !req.path.is_file() {
                    return Err(ApiError::unprocessable(format!("{} is not a readable file", req.path.display())));
                }
                nifti_io::read_volume(&req.path, modality)?
            } else {
                nifti_io::read_volume_bytes(&body, q.modality.unwrap_or(Modality::CT))?
            };
            Session::create(dir, id, volume, &inner.pipeline)
        })
        .await?;
    let st = &session.state;
    let created = Created { id: st.id.clone(), dims: st.dims, spacing: st.spacing, modality: st.modality };
    let slot = Arc::new(Slot { op: Arc::default(), session: RwLock::new(session) });
    state.0.slots.lock().map_err(poisoned)?.insert(created.id.clone(), slot);
    Ok((StatusCode::CREATED, Json(created)))
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Vec<SessionInfo>>> {
    let dir = state.0.data_dir.clone();
    let mut ids: Vec<String> = blocking(move || {
        let entries = std::fs::read_dir(&dir).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("state.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| valid_id(id))
            .collect())
    })
    .await?;
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let slot = state.slot(&id).await?;
        let info = slot.session.read().map_err(poisoned)?.info(busy(&slot));
        out.push(info);
    }
    out.sort_by_key(|i| (i.created_ms, i.id.clone()));
    Ok(Json(out))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let slot = state.slot(&id).await?;
    let info = slot.session.read().map_err(poisoned)?.info(busy(&slot));
    Ok(Json(info))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRequest {
    prompts: Vec<PromptInput>,
    #[serde(default)]
    mode: PromptMode,
    #[serde(default)]
    stage: Stages,
}

#[derive(Serialize, Deserialize)]
pub struct SegmentResponse {
    pub report: RunReport,
    pub classes: Vec<ClassEntry>,
    pub labels_sha256: String,
}

#[derive(Serialize, Deserialize)]
pub struct RefineResponse {
    pub report: RunReport,
    pub labels_sha256: String,
}

/// Text-prompted run. In hybrid mode the session's scribbles join the
/// prompts when the class manifest is unchanged.
async fn segment(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SegmentResponse>> {
    let req: SegmentRequest = serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let slot = state.slot(&id).await?;
    let _op = try_op(&slot)?;
    let worker_slot = slot.clone();
    let res = state
        .run(move |inner| {
            let prompts: Vec<PromptRequest> = req.prompts.into_iter().map(Into::into).collect();
            let queries = pipeline::resolve_queries(&prompts, inner.kit.models())?;
            let (volume, scribbles) = {
                let s = worker_slot.session.read().map_err(poisoned)?;
                let same = s.classes().iter().map(|c| c.class_id).eq(queries.classes.iter().map(|c| c.class_id));
                let scribbles = if same && req.mode == PromptMode::Hybrid { s.scribbles.clone() } else { None };
                (s.volume.clone(), scribbles)
            };
            let config = PipelineConfig { mode: req.mode, stages: req.stage, ..inner.pipeline.clone() };
            let out = pipeline::run_queries(&volume, &queries, scribbles.as_ref(), inner.kit.models(), &config)?;
            let response = SegmentResponse {
                report: out.report.clone(),
                classes: queries.classes.clone(),
                labels_sha256: labels_sha256(&out.labels),
            };
            worker_slot.session.write().map_err(poisoned)?.set_segmentation(prompts, queries, out, req.mode, req.stage)?;
            Ok(response)
        })
        .await?;
    Ok(Json(res))
}

async fn add_scribble(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let stroke: ScribbleStroke = serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let slot = state.slot(&id).await?;
    let _op = try_op(&slot)?;
    let worker_slot = slot.clone();
    blocking(move || worker_slot.session.write().map_err(poisoned)?.apply_stroke(&stroke)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn clear_scribbles(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let slot = state.slot(&id).await?;
    let _op = try_op(&slot)?;
    let worker_slot = slot.clone();
    blocking(move || worker_slot.session.write().map_err(poisoned)?.clear_scribbles()).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Re-runs stage 2 from the stored coarse probabilities with the scribbles
/// merged in.
async fn refine(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RefineResponse>> {
    let slot = state.slot(&id).await?;
    let _op = try_op(&slot)?;
    let worker_slot = slot.clone();
    let res = state
        .run(move |inner| {
            let (volume, result, scribbles) = {
                let s = worker_slot.session.read().map_err(poisoned)?;
                let result = s.result.clone().ok_or_else(|| ApiError::unprocessable("session has not been segmented"))?;
                (s.volume.clone(), result, s.scribbles.clone())
            };
            let config = PipelineConfig { mode: PromptMode::Hybrid, stages: Stages::TwoStage, ..inner.pipeline.clone() };
            let out = pipeline::refine(
                &volume,
                &result.queries,
                &result.coarse,
                scribbles.as_ref(),
                inner.kit.models(),
                &config,
            )?;
            let response = RefineResponse { report: out.report.clone(), labels_sha256: labels_sha256(&out.labels) };
            worker_slot.session.write().map_err(poisoned)?.set_refined(out)?;
            Ok(response)
        })
        .await?;
    Ok(Json(res))
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: usize,
    index: usize,
    #[serde(default)]
    overlay: Option<String>,
}

async fn slice(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let overlay: Overlay = q.overlay.as_deref().unwrap_or("labels").parse()?;
    let slot = state.slot(&id).await?;
    let png = blocking(move || {
        let s = slot.session.read().map_err(poisoned)?;
        let plane = SlicePlane::new(s.state.dims, q.axis, q.index)?;
        // without a result the labels overlay falls back to the bare image
        let overlay = if overlay == Overlay::Labels && s.result.is_none() { Overlay::None } else { overlay };
        let src = SliceSources {
            gray: &s.gray,
            labels: s.result.as_ref().map(|r| r.labels.as_ref()),
            probabilities: s.result.as_ref().map(|r| r.probabilities.as_ref()),
            classes: s.classes(),
        };
        render_png(&src, &plane, overlay)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = state.slot(&id).await?;
    let bytes = blocking(move || {
        let s = slot.session.read().map_err(poisoned)?;
        if s.result.is_none() {
            return Err(ApiError::not_found("session has no result yet"));
        }
        std::fs::read(s.labels_path()).map_err(|e| ApiError::internal(e.to_string()))
    })
    .await?;
    let disposition = format!("attachment; filename=\"{id}_labels.nii.gz\"");
    Ok(([(header::CONTENT_TYPE, "application/gzip".to_string()), (header::CONTENT_DISPOSITION, disposition)], bytes)
        .into_response())
}

pub async fn serve(addr: std::net::SocketAddr, state: AppState) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
