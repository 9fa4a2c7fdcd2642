//! HTTP editing API: scenes, direction catalog, edit rendering and
//! direction thumbnails over one loaded checkpoint and archive.
//!
//! | route | method | body / query |
//! |---|---|---|
//! | `/healthz` | GET | |
//! | `/catalog` | GET | |
//! | `/scene` | POST | `{seed}` |
//! | `/edit` | POST | `{sceneId, method?, edits: [EditSpec]}` |
//! | `/thumbnails` | GET | `sceneId`, `classId`, `method?` |

pub mod cache;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use semedit_core::directions::{DirectionSet, DirectionsArchive, Method};
use semedit_core::discovery::DiscoveryConfig;
use semedit_core::editing::{apply_edit_stack, delta_stats, n_max, DeltaStats, EditSpec};
use semedit_core::generator::{generate, SisGenerator, ToyGenerator};
use semedit_core::image::{label_map_to_png, Image};
use semedit_core::rng::derive_seed;
use semedit_core::scene::{build_latent, class_mask, LabelMap, LatentCode3D};
use semedit_core::synth::{render_layout, SyntheticSceneSpec};
use semedit_core::training::Checkpoint;
use semedit_core::Error;

use crate::cache::LruCache;

/// α is snapped to this many steps across `[-n_max, n_max]`.
pub const ALPHA_LEVELS: usize = 256;
const CACHE_CAPACITY: usize = 512;

pub fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Read-only model state shared by every request.
pub struct Artifacts {
    pub generator: ToyGenerator,
    pub archive: DirectionsArchive,
    pub checkpoint_hash: String,
    pub archive_hash: String,
    pub spec: SyntheticSceneSpec,
    pub n: f64,
    pub n_max: f64,
    pub default_method: Option<Method>,
}

impl Artifacts {
    pub fn new(ck: Checkpoint, archive: DirectionsArchive) -> semedit_core::Result<Self> {
        let checkpoint_hash = ck.hash()?;
        if archive.checkpoint_hash != checkpoint_hash {
            return Err(Error::Integrity(format!(
                "archive was built for checkpoint {} but {checkpoint_hash} is loaded",
                archive.checkpoint_hash
            )));
        }
        let cfg = ck.generator.config().clone();
        let spec = SyntheticSceneSpec {
            class_count: cfg.class_count,
            height: cfg.image_size,
            width: cfg.image_size,
            ..SyntheticSceneSpec::default()
        };
        let n = alpha_bound(&ck);
        let methods = archive.methods();
        let default_method = methods.iter().copied().find(|&m| m == Method::CtrlSis).or(methods.first().copied());
        Ok(Self {
            archive_hash: archive.hash()?,
            generator: ck.generator,
            archive,
            checkpoint_hash,
            spec,
            n,
            n_max: n_max(n),
            default_method,
        })
    }

    pub fn alpha_step(&self) -> f64 {
        2.0 * self.n_max / ALPHA_LEVELS as f64
    }

    pub fn quantize(&self, alpha: f64) -> f64 {
        let step = self.alpha_step();
        (alpha / step).round() * step
    }

    pub fn sets(&self, method: Method) -> Vec<DirectionSet> {
        self.archive.records.iter().filter(|r| r.method == method).cloned().collect()
    }
}

/// `n` for a checkpoint: the mean latent norm under the default estimator,
/// seeded by the checkpoint seed.
pub fn alpha_bound(ck: &Checkpoint) -> f64 {
    DiscoveryConfig::default().resolve_alpha_bound(ck.generator.latent_channels(), ck.seed)
}

pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub label_map: LabelMap,
    pub latent: LatentCode3D,
    pub base: Image,
}

pub fn scene_id(seed: u64) -> String {
    format!("scene-{seed}")
}

pub struct AppState {
    artifacts: RwLock<Option<Arc<Artifacts>>>,
    scenes: Mutex<HashMap<String, Arc<Scene>>>,
    cache: Mutex<LruCache<String, Arc<serde_json::Value>>>,
}

impl AppState {
    /// State that answers 503 until [`AppState::load`] is called.
    pub fn unloaded() -> Arc<Self> {
        Arc::new(Self {
            artifacts: RwLock::new(None),
            scenes: Mutex::new(HashMap::new()),
            cache: Mutex::new(LruCache::new(CACHE_CAPACITY)),
        })
    }

    pub fn new(ck: Checkpoint, archive: DirectionsArchive) -> semedit_core::Result<Arc<Self>> {
        let state = Self::unloaded();
        state.load(ck, archive)?;
        Ok(state)
    }

    pub fn load(&self, ck: Checkpoint, archive: DirectionsArchive) -> semedit_core::Result<()> {
        let a = Artifacts::new(ck, archive)?;
        *self.artifacts.write().expect("lock") = Some(Arc::new(a));
        self.scenes.lock().expect("lock").clear();
        *self.cache.lock().expect("lock") = LruCache::new(CACHE_CAPACITY);
        Ok(())
    }

    pub fn artifacts(&self) -> Option<Arc<Artifacts>> {
        self.artifacts.read().expect("lock").clone()
    }

    pub fn cache_stats(&self) -> (u64, u64) {
        self.cache.lock().expect("lock").stats()
    }

    fn cached(&self, key: &str) -> Option<Arc<serde_json::Value>> {
        self.cache.lock().expect("lock").get(&key.to_string())
    }

    fn remember(&self, key: String, v: Arc<serde_json::Value>) {
        self.cache.lock().expect("lock").insert(key, v);
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::AlphaOutOfBounds { .. }
            | Error::ClassAbsent(_)
            | Error::ClassOutOfRange { .. }
            | Error::Config(_)
            | Error::Shape(_)
            | Error::Dimension(_) => StatusCode::UNPROCESSABLE_ENTITY,
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

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CatalogClass {
    pub id: usize,
    pub name: String,
    /// K per method id.
    pub k: HashMap<String, usize>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Catalog {
    pub checkpoint_hash: String,
    pub archive_hash: String,
    pub classes: Vec<CatalogClass>,
    pub methods: Vec<Method>,
    pub default_method: Option<Method>,
    pub n: f64,
    pub n_max: f64,
    pub alpha_levels: usize,
    pub alpha_step: f64,
    pub alpha_quantization: String,
    pub blocks: usize,
    pub latent_channels: usize,
    pub image_size: usize,
}

pub fn catalog(a: &Artifacts) -> Catalog {
    let classes = a
        .archive
        .classes()
        .into_iter()
        .map(|c| CatalogClass {
            id: c,
            name: a.spec.class_name(c).to_string(),
            k: a.archive.records.iter().filter(|r| r.class_id == c).map(|r| (r.method.id().to_string(), r.k())).collect(),
        })
        .collect();
    Catalog {
        checkpoint_hash: a.checkpoint_hash.clone(),
        archive_hash: a.archive_hash.clone(),
        classes,
        methods: a.archive.methods(),
        default_method: a.default_method,
        n: a.n,
        n_max: a.n_max,
        alpha_levels: ALPHA_LEVELS,
        alpha_step: a.alpha_step(),
        alpha_quantization: format!(
            "alpha is rounded to the nearest multiple of alphaStep = 2*nMax/{ALPHA_LEVELS} after the bound check"
        ),
        blocks: a.generator.blocks(),
        latent_channels: a.generator.latent_channels(),
        image_size: a.spec.height,
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "loaded": state.artifacts().is_some() }))
}

async fn get_catalog(State(state): State<Arc<AppState>>) -> ApiResult<Json<Catalog>> {
    let a = state.artifacts().ok_or_else(ApiError::unavailable)?;
    Ok(Json(catalog(&a)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRequest {
    seed: u64,
}

pub fn build_scene(a: &Artifacts, seed: u64) -> semedit_core::Result<Scene> {
    let label_map = render_layout(&a.spec, seed)?;
    let d = a.generator.latent_channels();
    let latent = build_latent(derive_seed(seed, &[0x5ce]), d, label_map.height(), label_map.width())?;
    let base = generate(&a.generator, &latent, &label_map)?;
    Ok(Scene { id: scene_id(seed), seed, label_map, latent, base })
}

async fn post_scene(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: SceneRequest = parse(&body)?;
    let a = state.artifacts().ok_or_else(ApiError::unavailable)?;
    let id = scene_id(req.seed);
    let existing = state.scenes.lock().expect("lock").get(&id).cloned();
    let scene = match existing {
        Some(s) => s,
        None => {
            let s = Arc::new(blocking(move || Ok(build_scene(&a, req.seed)?)).await?);
            state.scenes.lock().expect("lock").insert(id, s.clone());
            s
        }
    };
    Ok(Json(serde_json::json!({
        "sceneId": scene.id,
        "seed": scene.seed,
        "classesPresent": scene.label_map.present_classes(),
        "labelMapPng": b64(&label_map_to_png(&scene.label_map)?),
        "baseImagePng": b64(&scene.base.to_png()?),
    })))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EditRequest {
    pub scene_id: String,
    #[serde(default)]
    pub method: Option<Method>,
    pub edits: Vec<EditSpec>,
}

fn scene(state: &AppState, id: &str) -> ApiResult<Arc<Scene>> {
    state.scenes.lock().expect("lock").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown scene {id:?}")))
}

fn method_or_default(a: &Artifacts, m: Option<Method>) -> ApiResult<Method> {
    let m = m.or(a.default_method).ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "archive is empty"))?;
    if !a.archive.methods().contains(&m) {
        return Err(ApiError::not_found(format!("method {} not in archive", m.id())));
    }
    Ok(m)
}

/// Renders a stack after the bound check and α quantization.
pub fn render_edit(a: &Artifacts, scene: &Scene, method: Method, edits: &[EditSpec]) -> semedit_core::Result<serde_json::Value> {
    for e in edits {
        if !(e.alpha.abs() <= a.n_max) {
            return Err(Error::AlphaOutOfBounds { alpha: e.alpha, bound: a.n_max });
        }
    }
    let edits: Vec<EditSpec> = edits.iter().map(|e| EditSpec { alpha: a.quantize(e.alpha), ..e.clone() }).collect();
    let sets = a.sets(method);
    let image = apply_edit_stack(&a.generator, &scene.latent, &scene.label_map, &edits, &sets, a.n_max)?;
    let stats: Vec<DeltaStats> = edits
        .iter()
        .map(|e| Ok(delta_stats(&scene.base, &image, &class_mask(&scene.label_map, e.class_id)?)))
        .collect::<semedit_core::Result<_>>()?;
    Ok(serde_json::json!({
        "imagePng": b64(&image.to_png()?),
        "perEditDeltaStats": stats,
        "alphas": edits.iter().map(|e| e.alpha).collect::<Vec<_>>(),
        "method": method,
    }))
}

async fn post_edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: EditRequest = parse(&body)?;
    let a = state.artifacts().ok_or_else(ApiError::unavailable)?;
    let scene = scene(&state, &req.scene_id)?;
    let method = method_or_default(&a, req.method)?;
    let quantized: Vec<EditSpec> =
        req.edits.iter().map(|e| EditSpec { alpha: if e.alpha.abs() <= a.n_max { a.quantize(e.alpha) } else { e.alpha }, ..e.clone() }).collect();
    let key = format!("edit|{}|{}|{}", scene.id, method.id(), serde_json::to_string(&quantized).expect("plain data"));
    if let Some(hit) = state.cached(&key) {
        return Ok(Json((*hit).clone()));
    }
    let value = blocking(move || Ok(render_edit(&a, &scene, method, &req.edits)?)).await?;
    state.remember(key, Arc::new(value.clone()));
    Ok(Json(value))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ThumbQuery {
    scene_id: String,
    class_id: usize,
    #[serde(default)]
    method: Option<Method>,
}

/// One preview per direction of `class` at `α = n/2`.
pub fn render_thumbnails(a: &Artifacts, scene: &Scene, method: Method, class: usize) -> semedit_core::Result<serde_json::Value> {
    let sets = a.sets(method);
    let set = sets
        .iter()
        .find(|s| s.class_id == class)
        .ok_or_else(|| Error::Config(format!("no {} directions for class {class}", method.id())))?;
    let alpha = a.n / 2.0;
    let images = (0..set.k())
        .map(|k| {
            let img = apply_edit_stack(&a.generator, &scene.latent, &scene.label_map, &[EditSpec::new(class, k, alpha)], &sets, a.n_max)?;
            Ok(b64(&img.to_png()?))
        })
        .collect::<semedit_core::Result<Vec<_>>>()?;
    Ok(serde_json::json!({ "classId": class, "method": method, "alpha": alpha, "images": images }))
}

async fn get_thumbnails(
    State(state): State<Arc<AppState>>,
    query: Result<Query<ThumbQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.to_string()))?;
    let a = state.artifacts().ok_or_else(ApiError::unavailable)?;
    let scene = scene(&state, &q.scene_id)?;
    let method = method_or_default(&a, q.method)?;
    let key = format!("thumbs|{}|{}|{}", scene.id, method.id(), q.class_id);
    if let Some(hit) = state.cached(&key) {
        return Ok(Json((*hit).clone()));
    }
    let class = q.class_id;
    let value = blocking(move || Ok(render_thumbnails(&a, &scene, method, class)?)).await?;
    state.remember(key, Arc::new(value.clone()));
    Ok(Json(value))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/catalog", get(get_catalog))
        .route("/scene", post(post_scene))
        .route("/edit", post(post_edit))
        .route("/thumbnails", get(get_thumbnails))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// Runs [`serve`] on a fresh multi-threaded runtime until the process ends.
pub fn serve_blocking(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(state, addr))
}
