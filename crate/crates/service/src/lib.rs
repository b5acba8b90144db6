//! HTTP service for counting, scene rendering and checkpoint management.
//!
//! All routes live under `/v1`:
//!
//! | method | path | |
//! |---|---|---|
//! | GET  | `/health` | liveness and loaded checkpoint |
//! | GET  | `/checkpoints` | checkpoint files in the checkpoint directory |
//! | POST | `/checkpoints/load` | swap the active checkpoint |
//! | POST | `/count` | count with a prompt spec |
//! | POST | `/images` | upload a PNG, returns its id |
//! | POST | `/scenes/render` | render a synthetic scene |
//! | GET  | `/scenes/{id}/image` | PNG of any stored image |
//! | POST | `/evaluate` | evaluate the model on a dataset directory |

pub mod cache;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock as StdRwLock};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::RwLock;
use tower_http::cors::{Any, CorsLayer};

use countpp::checkpoint::{Checkpoint, CheckpointMeta};
use countpp::data::{generate_scene, load_dataset, Instance, SceneConfig};
use countpp::filtering::CountResult;
use countpp::geometry::BBox;
use countpp::metrics::{EvalMode, EvalReport};
use countpp::model::Model;
use countpp::pipelines::{result_of, AdaptiveConfig, Bilinear, CountMode, Counter, IterationRecord};
use countpp::prompts::PromptSpec;
use countpp::{Error as CoreError, ImageStore, ImageTensor, MemoryImageStore};

use crate::cache::{cached_count, ForwardCache};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_UPLOAD: usize = 4 * 1024 * 1024;
pub const DEFAULT_CACHE_CAPACITY: usize = 256;
const PNG_MAGIC: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    /// Checkpoint loaded at start-up.
    pub checkpoint: Option<PathBuf>,
    /// Directory listed by `/checkpoints` and searched by `/checkpoints/load`.
    pub checkpoint_dir: PathBuf,
    pub cache_capacity: usize,
    /// Largest accepted PNG, bytes.
    pub max_upload: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            checkpoint: None,
            checkpoint_dir: PathBuf::from("."),
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            max_upload: DEFAULT_MAX_UPLOAD,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `COUNTPP_PORT` and `COUNTPP_CKPT`. The
    /// checkpoint directory defaults to the checkpoint's parent.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Ok(p) = std::env::var("COUNTPP_PORT") {
            cfg.port = p.parse().map_err(|_| format!("COUNTPP_PORT is not a port number: {p}"))?;
        }
        if let Ok(c) = std::env::var("COUNTPP_CKPT") {
            cfg.set_checkpoint(PathBuf::from(c));
        }
        Ok(cfg)
    }

    pub fn set_checkpoint(&mut self, path: PathBuf) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.checkpoint_dir = parent.to_path_buf();
        }
        self.checkpoint = Some(path);
    }
}

pub struct Loaded {
    pub id: String,
    pub model: Model,
    pub meta: CheckpointMeta,
}

pub struct AppState {
    config: ServiceConfig,
    /// Write-locked only to swap checkpoints, which waits for in-flight
    /// requests to finish.
    model: Arc<RwLock<Option<Loaded>>>,
    images: StdRwLock<MemoryImageStore>,
    cache: ForwardCache,
    scene_counter: std::sync::atomic::AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let cache = ForwardCache::new(config.cache_capacity);
        Self {
            config,
            model: Arc::new(RwLock::new(None)),
            images: StdRwLock::new(MemoryImageStore::new()),
            cache,
            scene_counter: Default::default(),
        }
    }

    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }

    /// Installs a model directly, bypassing the checkpoint directory.
    pub async fn install(&self, id: impl Into<String>, model: Model, meta: CheckpointMeta) {
        let mut guard = self.model.write().await;
        *guard = Some(Loaded { id: id.into(), model, meta });
        self.cache.clear();
    }

    pub async fn load_checkpoint_file(&self, path: &Path) -> Result<String, ApiError> {
        let ck = Checkpoint::load(path).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.install(id.clone(), ck.model, ck.meta).await;
        Ok(id)
    }

    pub fn insert_image(&self, id: impl Into<String>, image: ImageTensor) {
        self.images.write().expect("image store lock").insert(id, image);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::InvalidGeometry(_) | CoreError::InvalidPrompt(_) | CoreError::Config(_) | CoreError::Image(_) => {
                StatusCode::BAD_REQUEST
            }
            CoreError::UnknownImage(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The image to count: a stored id or an inline base64 PNG.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Id { id: String },
    Upload { png_base64: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CountOptions {
    pub sigma: Option<f64>,
    pub iterative: bool,
    pub n: usize,
    pub max_iter: usize,
    pub adaptive: bool,
    /// Filter-only path over cached artifacts.
    pub cached: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self { sigma: None, iterative: false, n: 3, max_iter: 5, adaptive: false, cached: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CountRequest {
    pub image: ImageSource,
    pub spec: PromptSpec,
    #[serde(default)]
    pub options: CountOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CountResponse {
    #[serde(flatten)]
    pub result: CountResult,
    pub image_id: String,
    pub sigma: f64,
    /// Boxes of queries dropped because a negative prompt dominated.
    pub negative_boxes: Vec<BBox>,
    /// Whether every forward artifact came from the cache.
    pub cached: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<IterationRecord>>,
}

fn decode_png(state: &AppState, b64: &str) -> ApiResult<(String, ImageTensor)> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad(format!("invalid base64: {e}")))?;
    if bytes.len() > state.config.max_upload {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("upload of {} bytes exceeds the {} byte limit", bytes.len(), state.config.max_upload),
        ));
    }
    if !bytes.starts_with(PNG_MAGIC) {
        return Err(ApiError::bad("only PNG uploads are accepted"));
    }
    let img = ImageTensor::from_png_bytes(&bytes)?;
    let digest: String = Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok((format!("upload-{digest}"), img))
}

fn resolve_image(state: &AppState, src: &ImageSource) -> ApiResult<(String, ImageTensor)> {
    match src {
        ImageSource::Id { id } => {
            let img = state.images.read().expect("image store lock").fetch(id)?;
            Ok((id.clone(), img))
        }
        ImageSource::Upload { png_base64 } => {
            let (id, img) = decode_png(state, png_base64)?;
            state.insert_image(id.clone(), img.clone());
            Ok((id, img))
        }
    }
}

fn run_count(state: &AppState, model: &Model, default_sigma: f64, req: &CountRequest) -> ApiResult<CountResponse> {
    let o = &req.options;
    let sigma = o.sigma.unwrap_or(default_sigma);
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(ApiError::bad(format!("sigma must lie in (0, 1), got {sigma}")));
    }
    if o.cached && (o.iterative || o.adaptive) {
        return Err(ApiError::bad("the cached path supports single-pass counting only"));
    }
    if o.iterative && o.adaptive {
        return Err(ApiError::bad("choose at most one of iterative and adaptive"));
    }
    req.spec.validate()?;
    let (image_id, image) = resolve_image(state, &req.image)?;
    let images = state.images.read().expect("image store lock");
    let store: &dyn ImageStore = &*images;
    let counter = Counter { model, store, sigma };
    let mut resp = CountResponse {
        result: CountResult::empty(),
        image_id: image_id.clone(),
        sigma,
        negative_boxes: vec![],
        cached: false,
        trace: None,
    };
    if o.cached {
        let c = cached_count(&state.cache, model, store, &image_id, &image, &req.spec, sigma)?;
        resp.negative_boxes = c.negative_boxes();
        resp.result = CountResult::from_decision(&c.decision, &c.boxes);
        resp.cached = c.hit;
    } else if o.iterative {
        let r = counter.iterative_count(&image, &image_id, &req.spec, o.n, o.max_iter)?;
        resp.result = r.result;
        resp.trace = Some(r.trace);
    } else if o.adaptive {
        resp.result = counter.adaptive_count(&image, &image_id, &req.spec, &AdaptiveConfig::default(), &Bilinear)?;
    } else {
        let inf = counter.infer(&image, &image_id, &req.spec)?;
        let d = countpp::filtering::filter_queries(&inf.similarity()?, sigma)?;
        resp.negative_boxes = d
            .reasons
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Some(countpp::filtering::Rejection::NegativeDominates))
            .map(|(i, _)| inf.batch.boxes[i])
            .collect();
        resp.result = result_of(&inf, sigma)?;
    }
    Ok(resp)
}

/// Runs `f` on a blocking thread while holding a read lock on the model.
async fn with_model<T: Send + 'static>(
    state: Arc<AppState>,
    f: impl FnOnce(&AppState, &Loaded) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let guard = state.model.clone().read_owned().await;
    if guard.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no checkpoint loaded"));
    }
    tokio::task::spawn_blocking(move || f(&state, guard.as_ref().expect("checked above")))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn count(State(state): State<Arc<AppState>>, Json(req): Json<CountRequest>) -> ApiResult<Json<CountResponse>> {
    with_model(state, move |s, l| run_count(s, &l.model, l.meta.sigma, &req)).await.map(Json)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let guard = state.model.read().await;
    Json(serde_json::json!({
        "status": "ok",
        "checkpoint": guard.as_ref().map(|l| l.id.clone()),
        "cache_entries": state.cache.len(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub id: String,
    pub loaded: bool,
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<CheckpointEntry>>> {
    let loaded = state.model.read().await.as_ref().map(|l| l.id.clone());
    let mut out = Vec::new();
    let dir = std::fs::read_dir(&state.config.checkpoint_dir)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    for entry in dir.flatten() {
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "ckpt") {
            let id = entry.file_name().to_string_lossy().into_owned();
            out.push(CheckpointEntry { loaded: loaded.as_deref() == Some(id.as_str()), id });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Json(out))
}

#[derive(Debug, Clone, Deserialize)]
pub struct LoadRequest {
    pub id: String,
}

async fn load_checkpoint(State(state): State<Arc<AppState>>, Json(req): Json<LoadRequest>) -> ApiResult<Json<serde_json::Value>> {
    if req.id.is_empty() || req.id.contains('/') || req.id.contains('\\') || req.id.contains("..") {
        return Err(ApiError::bad("checkpoint id must be a file name in the checkpoint directory"));
    }
    let path = state.config.checkpoint_dir.join(&req.id);
    if !path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no checkpoint `{}`", req.id)));
    }
    let id = state.load_checkpoint_file(&path).await?;
    Ok(Json(serde_json::json!({ "loaded": id })))
}

#[derive(Debug, Clone, Deserialize)]
pub struct UploadRequest {
    pub png_base64: String,
}

async fn upload(State(state): State<Arc<AppState>>, Json(req): Json<UploadRequest>) -> ApiResult<Json<serde_json::Value>> {
    let (id, img) = decode_png(&state, &req.png_base64)?;
    let (h, w) = (img.height(), img.width());
    state.insert_image(id.clone(), img);
    Ok(Json(serde_json::json!({ "id": id, "width": w, "height": h })))
}

#[derive(Debug, Clone, Deserialize)]
pub struct RenderRequest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: SceneConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RenderResponse {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

async fn render_scene(State(state): State<Arc<AppState>>, Json(req): Json<RenderRequest>) -> ApiResult<Json<RenderResponse>> {
    let scene = generate_scene(req.seed, &req.config)?;
    let n = state.scene_counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    let id = format!("scene-{n}");
    let resp = RenderResponse { id: id.clone(), width: scene.image.width(), height: scene.image.height(), instances: scene.instances };
    state.insert_image(id, scene.image);
    Ok(Json(resp))
}

async fn scene_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let img = state
        .images
        .read()
        .expect("image store lock")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no image `{id}`")))?;
    let png = img.to_png_bytes()?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Clone, Deserialize)]
pub struct EvaluateRequest {
    /// Dataset directory on the server (PNGs plus `scenes.jsonl`).
    pub dataset: PathBuf,
    #[serde(default)]
    pub count_mode: CountMode,
    #[serde(default)]
    pub eval_mode: EvalMode,
    pub sigma: Option<f64>,
}

async fn evaluate(State(state): State<Arc<AppState>>, Json(req): Json<EvaluateRequest>) -> ApiResult<Json<EvalReport>> {
    with_model(state, move |s, l| {
        let scenes = load_dataset(&req.dataset).map_err(|e| ApiError::bad(e.to_string()))?;
        let images = s.images.read().expect("image store lock");
        let counter = Counter { model: &l.model, store: &*images, sigma: req.sigma.unwrap_or(l.meta.sigma) };
        Ok(counter.evaluate_scenes(&scenes, req.count_mode, req.eval_mode)?)
    })
    .await
    .map(Json)
}

/// Router with every `/v1` route, CORS and the upload size cap.
pub fn router(state: Arc<AppState>) -> Router {
    // base64 inflates payloads by 4/3; leave room for the JSON around it.
    let body_limit = state.config.max_upload / 3 * 4 + 64 * 1024;
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/checkpoints", get(list_checkpoints))
        .route("/checkpoints/load", post(load_checkpoint))
        .route("/count", post(count))
        .route("/images", post(upload))
        .route("/scenes/render", post(render_scene))
        .route("/scenes/{id}/image", get(scene_image))
        .route("/evaluate", post(evaluate));
    Router::new()
        .nest("/v1", v1)
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any))
        .with_state(state)
}

/// Builds the state, loads the start-up checkpoint if any, and serves until
/// the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(config.clone()));
    if let Some(path) = &config.checkpoint {
        state
            .load_checkpoint_file(path)
            .await
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.message))?;
    }
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await
}
