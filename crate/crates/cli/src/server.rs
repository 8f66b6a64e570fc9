//! HTTP API over a loaded checkpoint.
//!
//! Every handler reads an immutable snapshot of the model; `--reload`
//! swaps the snapshot between requests when the checkpoint file changes.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime};

use artipoint::kinematics::{interpolate_poses, Pose};
use artipoint::render::Camera;
use artipoint::scene_io::{load_checkpoint, Checkpoint};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::CliError;

/// Largest accepted render edge in pixels.
pub const MAX_RENDER_SIZE: usize = 2048;
/// Largest accepted interpolation length.
pub const MAX_STEPS: usize = 10_000;
const RELOAD_POLL: Duration = Duration::from_millis(500);

pub struct AppState {
    current: RwLock<Arc<Checkpoint>>,
}

impl AppState {
    pub fn new(ck: Checkpoint) -> Arc<Self> {
        Arc::new(Self {
            current: RwLock::new(Arc::new(ck)),
        })
    }

    pub fn snapshot(&self) -> Arc<Checkpoint> {
        self.current.read().expect("lock poisoned").clone()
    }

    pub fn replace(&self, ck: Checkpoint) {
        *self.current.write().expect("lock poisoned") = Arc::new(ck);
    }
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

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn arity_error(e: artipoint::Error) -> ApiError {
    match e {
        artipoint::Error::PoseArity { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        other => ApiError::bad_request(other.to_string()),
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JointInfo {
    pub id: usize,
    pub position: [f64; 3],
    pub parent: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BoneInfo {
    pub id: usize,
    /// joint the bone rotates about
    pub parent: usize,
    pub child: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SkeletonResponse {
    pub joints: Vec<JointInfo>,
    pub bones: Vec<BoneInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetaResponse {
    pub cameras: Vec<Camera>,
    pub timestamps: Vec<f64>,
    pub canonical_index: usize,
    pub bones: usize,
    pub joints: usize,
    pub simplified: bool,
    pub iteration: usize,
}

/// Camera of a render request: a dataset camera id, an orbit around a
/// target, or a full explicit camera.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    Explicit(Camera),
    Orbit {
        azimuth_deg: f64,
        elevation_deg: f64,
        radius: f64,
        #[serde(default = "default_fov")]
        fov_deg: f64,
        #[serde(default)]
        target: [f64; 3],
    },
    Id {
        id: usize,
    },
}

fn default_fov() -> f64 {
    40.0
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenderRequest {
    pub pose: Pose,
    pub camera: CameraSpec,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub pose_a: Pose,
    pub pose_b: Pose,
    pub steps: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/skeleton", get(skeleton))
        .route("/api/pose", get(pose))
        .route("/api/render", post(render))
        .route("/api/interpolate", post(interpolate))
        .route("/api/meta", get(meta))
        .with_state(state)
}

async fn skeleton(State(st): State<Arc<AppState>>) -> Json<SkeletonResponse> {
    let ck = st.snapshot();
    let sk = &ck.model.skeleton;
    let joints = sk
        .joints()
        .iter()
        .zip(sk.parents())
        .enumerate()
        .map(|(id, (p, parent))| JointInfo {
            id,
            position: *p,
            parent: *parent,
        })
        .collect();
    let bones = sk
        .bones()
        .into_iter()
        .enumerate()
        .map(|(id, (parent, child))| BoneInfo { id, parent, child })
        .collect();
    Json(SkeletonResponse { joints, bones })
}

async fn pose(State(st): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> Result<Json<Pose>, ApiError> {
    let raw = q.get("t").ok_or_else(|| ApiError::bad_request("missing query parameter t"))?;
    let t: f64 = raw
        .parse()
        .ok()
        .filter(|t: &f64| t.is_finite())
        .ok_or_else(|| ApiError::bad_request(format!("t must be a finite number, got {raw:?}")))?;
    let ck = st.snapshot();
    ck.model
        .pose_at(t)
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn resolve_camera(ck: &Checkpoint, spec: &CameraSpec, width: Option<usize>, height: Option<usize>) -> Result<Camera, ApiError> {
    let size = |w: Option<usize>, h: Option<usize>, dw: usize, dh: usize| {
        let (w, h) = (w.unwrap_or(dw), h.unwrap_or(dh));
        if w == 0 || h == 0 || w > MAX_RENDER_SIZE || h > MAX_RENDER_SIZE {
            return Err(ApiError::bad_request(format!(
                "render size {w}x{h} outside 1..={MAX_RENDER_SIZE}"
            )));
        }
        Ok((w, h))
    };
    let cam = match spec {
        CameraSpec::Id { id } => {
            let base = ck
                .cameras
                .iter()
                .find(|c| c.id == *id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown camera {id}")))?;
            let (w, h) = size(width, height, base.width, base.height)?;
            base.resized(w, h)
        }
        CameraSpec::Explicit(c) => {
            let (w, h) = size(width, height, c.width, c.height)?;
            c.resized(w, h)
        }
        CameraSpec::Orbit {
            azimuth_deg,
            elevation_deg,
            radius,
            fov_deg,
            target,
        } => {
            let (dw, dh) = ck.cameras.first().map_or((64, 64), |c| (c.width, c.height));
            let (w, h) = size(width, height, dw, dh)?;
            if !(radius.is_finite() && *radius > 0.0 && fov_deg.is_finite() && *fov_deg > 0.0 && *fov_deg < 180.0) {
                return Err(ApiError::bad_request("orbit needs a positive radius and a field of view in (0, 180)"));
            }
            Camera::orbit(usize::MAX, *target, *azimuth_deg, *elevation_deg, *radius, w, h, *fov_deg)
        }
    };
    cam.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(cam)
}

async fn render(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse_body(&body)?;
    let ck = st.snapshot();
    req.pose.check_arity(ck.model.num_bones()).map_err(arity_error)?;
    let cam = resolve_camera(&ck, &req.camera, req.width, req.height)?;
    let png = tokio::task::spawn_blocking(move || crate::commands::render_png(&ck.model, &cam, &req.pose))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn interpolate(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Vec<Pose>>, ApiError> {
    let req: InterpolateRequest = parse_body(&body)?;
    if req.steps < 2 || req.steps > MAX_STEPS {
        return Err(ApiError::bad_request(format!("steps must be in 2..={MAX_STEPS}")));
    }
    let bones = st.snapshot().model.num_bones();
    req.pose_a.check_arity(bones).map_err(arity_error)?;
    req.pose_b.check_arity(bones).map_err(arity_error)?;
    interpolate_poses(&req.pose_a, &req.pose_b, req.steps)
        .map(Json)
        .map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn meta(State(st): State<Arc<AppState>>) -> Json<MetaResponse> {
    let ck = st.snapshot();
    Json(MetaResponse {
        cameras: ck.cameras.clone(),
        timestamps: ck.meta.timestamps.clone(),
        canonical_index: ck.meta.canonical_index,
        bones: ck.model.num_bones(),
        joints: ck.model.skeleton.num_joints(),
        simplified: ck.model.simplified,
        iteration: ck.iteration,
    })
}

fn stamp(path: &Path) -> Option<(SystemTime, u64)> {
    let m = std::fs::metadata(path).ok()?;
    Some((m.modified().ok()?, m.len()))
}

/// Polls `path` and swaps in the checkpoint whenever its stamp changes.
/// A file that fails to load leaves the current model in place.
pub async fn watch(state: Arc<AppState>, path: PathBuf) {
    let mut last = stamp(&path);
    loop {
        tokio::time::sleep(RELOAD_POLL).await;
        let now = stamp(&path);
        if now.is_none() || now == last {
            continue;
        }
        last = now;
        let p = path.clone();
        match tokio::task::spawn_blocking(move || load_checkpoint(&p)).await {
            Ok(Ok(ck)) => {
                log::info!("reloaded {}", path.display());
                state.replace(ck);
            }
            Ok(Err(e)) => log::warn!("reload of {} failed, keeping the current model: {e}", path.display()),
            Err(e) => log::warn!("reload task failed: {e}"),
        }
    }
}

pub async fn serve(state: Arc<AppState>, ckpt: PathBuf, addr: SocketAddr, reload: bool) -> std::io::Result<()> {
    if reload {
        tokio::spawn(watch(state.clone(), ckpt));
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::warn!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn serve_blocking(ckpt: PathBuf, addr: SocketAddr, reload: bool) -> Result<(), CliError> {
    let ck = load_checkpoint(&ckpt)?;
    let state = AppState::new(ck);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Data(format!("runtime: {e}")))?;
    rt.block_on(serve(state, ckpt, addr, reload))
        .map_err(|e| CliError::Data(format!("{addr}: {e}")))
}
