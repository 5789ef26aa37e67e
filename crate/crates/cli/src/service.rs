//! HTTP annotation service: sessions of 2D keypoints over one image, fit
//! on demand, journaled to disk after every mutation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use rigfit_core::fit_single::{self, FitConfig, FitResult, Observation2D, Prompt};
use rigfit_core::formats::{self, Document};
use rigfit_core::{camera, rig, synth, Camera, Error, KinematicRig, RigDefinition, RigParams};

use crate::CliError;

/// Vertices sent with an overlay: every n-th template vertex.
pub const OVERLAY_VERTEX_STRIDE: usize = 16;

pub const DEFAULT_RIG: &str = "default";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    /// Served static path or external URL.
    pub reference: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub id: String,
    pub image: ImageRef,
    pub rig_id: String,
    pub camera: Camera,
    pub keypoints: Vec<Observation2D>,
    pub params: RigParams,
    /// Append-only.
    pub history: Vec<FitResult>,
    /// Keypoints changed since the last fit.
    pub dirty: bool,
}

impl Document for Session {
    const KIND: &'static str = "session";
}

#[derive(Clone, Debug, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_rig_id")]
    pub rig_id: String,
    #[serde(default)]
    pub camera: Option<Camera>,
    #[serde(default)]
    pub init_params: Option<RigParams>,
    #[serde(default)]
    pub keypoints: Vec<Observation2D>,
}

fn default_rig_id() -> String {
    DEFAULT_RIG.to_string()
}

#[derive(Clone, Debug, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KeypointUpdate {
    pub keypoints: Vec<Observation2D>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Fit to every visible keypoint.
    #[default]
    Full,
    /// Move the prompt-flagged keypoints, hold the rest of the body.
    Prompted,
}

#[derive(Clone, Debug, Default, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    #[serde(default)]
    pub config: Option<FitConfig>,
    #[serde(default)]
    pub mode: FitMode,
}

#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
pub struct Created {
    pub session_id: String,
    pub session: Session,
}

#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
pub struct FitResponse {
    #[serde(flatten)]
    pub result: FitResult,
    /// State after the fit was applied.
    pub session: Session,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Point2 {
    pub id: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Overlay {
    /// Joints in front of the camera.
    pub joints2d: Vec<Point2>,
    /// `[parent, child]` joint pairs.
    pub bones: Vec<[usize; 2]>,
    /// Sampled surface points, keyed by keypoint id.
    pub vertices2d_sample: Vec<Point2>,
}

#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
pub struct RigInfo {
    pub id: String,
    pub joints: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub keypoint_count: usize,
    pub shape_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    pub code: u16,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<String>,
}

/// JSON Schemas of the request and response bodies.
pub fn schemas() -> Vec<(&'static str, serde_json::Value)> {
    fn one<T: JsonSchema>() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(T)).expect("schemas serialize")
    }
    vec![
        (Session::KIND, formats::json_schema::<Session>()),
        ("api-create-session", one::<CreateSession>()),
        ("api-created", one::<Created>()),
        ("api-keypoints", one::<KeypointUpdate>()),
        ("api-fit-request", one::<FitRequest>()),
        ("api-fit-response", one::<FitResponse>()),
        ("api-overlay", one::<Overlay>()),
        ("api-rig", one::<RigInfo>()),
        ("api-error", one::<ErrorBody>()),
    ]
}

/// Rest pose at the origin; pairs with [`default_camera`].
pub fn default_init(rig: &KinematicRig) -> RigParams {
    RigParams::rest(rig)
}

/// 50° horizontal field of view, 3 m in front of the body at hip height.
pub fn default_camera(width: u32, height: u32) -> rigfit_core::Result<Camera> {
    let k = camera::intrinsics_from_fov(50.0, width, height)?;
    Ok(camera::camera_ring(1, 3.0, [0.0, 0.9, 0.0], &k).remove(0))
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            path: None,
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            e if crate::is_numeric(e) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        let path = match &e {
            Error::Schema { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            path,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.status.as_u16(),
            message: self.message,
            path: self.path,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Bodies are parsed here rather than by the `Json` extractor so that every
/// schema violation is a 400 with a field path.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: e.into_inner().to_string(),
            path: Some(path),
        }
    })
}

struct Slot {
    state: Mutex<Session>,
    fitting: AtomicBool,
}

/// Clears the fitting flag when the fit ends, however it ends.
struct FitGuard<'a>(&'a AtomicBool);

impl Drop for FitGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

pub struct AppState {
    rigs: BTreeMap<String, Arc<KinematicRig>>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    journal: Option<PathBuf>,
}

impl AppState {
    /// Loads extra rigs from `<data_dir>/rigs/*.json` and replays the
    /// session journal from `<data_dir>/sessions`.
    pub fn open(data_dir: Option<&Path>) -> rigfit_core::Result<Self> {
        let mut rigs = BTreeMap::new();
        rigs.insert(DEFAULT_RIG.to_string(), Arc::new(synth::make_default_rig(0)));
        let mut sessions = HashMap::new();
        let journal = data_dir.map(|d| d.join("sessions"));
        if let Some(dir) = data_dir {
            let rig_dir = dir.join("rigs");
            if rig_dir.is_dir() {
                for path in sorted_json(&rig_dir)? {
                    let id = path
                        .file_name()
                        .and_then(|n| n.to_str())
                        .and_then(|n| n.strip_suffix(".json"))
                        .unwrap_or_default()
                        .to_string();
                    let rig = KinematicRig::new(formats::read::<RigDefinition>(&path)?)?;
                    rigs.insert(id, Arc::new(rig));
                }
            }
            let sdir = dir.join("sessions");
            fs::create_dir_all(&sdir)?;
            for path in sorted_json(&sdir)? {
                let s: Session = formats::read(&path)?;
                log::info!("restored session {}", s.id);
                sessions.insert(
                    s.id.clone(),
                    Arc::new(Slot {
                        state: Mutex::new(s),
                        fitting: AtomicBool::new(false),
                    }),
                );
            }
        }
        Ok(Self {
            rigs,
            sessions: RwLock::new(sessions),
            journal,
        })
    }

    fn rig(&self, id: &str) -> ApiResult<Arc<KinematicRig>> {
        self.rigs
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown rig {id:?}")))
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Write-then-rename so a crash never leaves a torn file.
    fn persist(&self, s: &Session) -> ApiResult<()> {
        let Some(dir) = &self.journal else {
            return Ok(());
        };
        let path = dir.join(format!("{}.json", s.id));
        let tmp = dir.join(format!(".{}.json.tmp", s.id));
        fs::write(&tmp, formats::to_json(s)?).map_err(Error::from)?;
        fs::rename(&tmp, &path).map_err(Error::from)?;
        Ok(())
    }
}

fn sorted_json(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

fn validate_keypoints(rig: &KinematicRig, kps: &[Observation2D]) -> ApiResult<()> {
    for (i, k) in kps.iter().enumerate() {
        k.validate(rig).map_err(|e| ApiError {
            path: Some(format!("keypoints[{i}]")),
            ..ApiError::from(e)
        })?;
    }
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok", "version": formats::TOOL_VERSION}))
}

async fn list_rigs(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let rigs: Vec<RigInfo> = app
        .rigs
        .iter()
        .map(|(id, r)| RigInfo {
            id: id.clone(),
            joints: r.joints().iter().map(|j| j.name.clone()).collect(),
            parents: (0..r.joint_count()).map(|j| r.parent(j)).collect(),
            keypoint_count: r.keypoint_count(),
            shape_count: r.shape_count(),
        })
        .collect();
    Json(serde_json::json!({ "rigs": rigs }))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let req: CreateSession = parse_body(&body)?;
    if req.width == 0 || req.height == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "image width and height must be nonzero"));
    }
    let rig = app.rig(&req.rig_id)?;
    let camera = match req.camera {
        Some(c) => {
            c.validate()?;
            c
        }
        None => default_camera(req.width, req.height)?,
    };
    let params = req.init_params.unwrap_or_else(|| default_init(&rig));
    params.validate(&rig)?;
    validate_keypoints(&rig, &req.keypoints)?;
    let session = Session {
        id: uuid::Uuid::new_v4().simple().to_string(),
        image: ImageRef {
            reference: req.image_ref,
            width: req.width,
            height: req.height,
        },
        rig_id: req.rig_id,
        camera,
        keypoints: req.keypoints,
        params,
        history: Vec::new(),
        dirty: false,
    };
    app.persist(&session)?;
    app.sessions.write().expect("session map poisoned").insert(
        session.id.clone(),
        Arc::new(Slot {
            state: Mutex::new(session.clone()),
            fitting: AtomicBool::new(false),
        }),
    );
    Ok((
        StatusCode::CREATED,
        Json(Created {
            session_id: session.id.clone(),
            session,
        }),
    ))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    let slot = app.slot(&id)?;
    let s = slot.state.lock().expect("session poisoned").clone();
    Ok(Json(s))
}

/// Entries replace the keypoint with the same id or are appended.
pub fn merge_keypoints(current: &mut Vec<Observation2D>, update: &[Observation2D]) {
    for k in update {
        match current.iter_mut().find(|c| c.id == k.id) {
            Some(c) => *c = k.clone(),
            None => current.push(k.clone()),
        }
    }
}

async fn put_keypoints(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Session>> {
    let slot = app.slot(&id)?;
    let req: KeypointUpdate = parse_body(&body)?;
    let mut s = slot.state.lock().expect("session poisoned");
    let rig = app.rig(&s.rig_id)?;
    validate_keypoints(&rig, &req.keypoints)?;
    merge_keypoints(&mut s.keypoints, &req.keypoints);
    s.dirty = true;
    app.persist(&s)?;
    Ok(Json(s.clone()))
}

/// Runs one fit for a session snapshot.
pub fn run_fit(rig: &KinematicRig, s: &Session, mode: FitMode, cfg: &FitConfig) -> rigfit_core::Result<FitResult> {
    match mode {
        FitMode::Full => fit_single::fit_single_view(rig, &s.params, &s.camera, &s.keypoints, None, cfg),
        FitMode::Prompted => {
            let prompts: Vec<Prompt> = s
                .keypoints
                .iter()
                .filter(|k| k.prompt && k.usable())
                .map(|k| Prompt { id: k.id, u: k.u, v: k.v })
                .collect();
            if prompts.is_empty() {
                return Err(Error::UnderConstrained {
                    visible: 0,
                    required: 1,
                });
            }
            // Joints the annotator marked invisible do not anchor the body.
            let hidden: Vec<usize> = s.keypoints.iter().filter(|k| !k.visible).map(|k| k.id).collect();
            let context: Vec<Observation2D> = fit_single::refinement_context(rig, &s.params, &s.camera, &prompts)?
                .into_iter()
                .filter(|o| !hidden.contains(&o.id))
                .collect();
            fit_single::prompted_refine_with_context(rig, &s.params, &s.camera, &prompts, &context, None, cfg)
        }
    }
}

async fn fit(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<FitResponse>> {
    let slot = app.slot(&id)?;
    let req: FitRequest = if body.iter().all(u8::is_ascii_whitespace) {
        FitRequest::default()
    } else {
        parse_body(&body)?
    };
    let cfg = match req.config {
        Some(c) => c,
        None if req.mode == FitMode::Prompted => FitConfig::refinement(),
        None => FitConfig::default(),
    };
    cfg.validate()?;
    if slot.fitting.swap(true, Ordering::AcqRel) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("a fit is already running for session {id}")));
    }
    let guard = FitGuard(&slot.fitting);
    let snapshot = slot.state.lock().expect("session poisoned").clone();
    let rig = app.rig(&snapshot.rig_id)?;
    let mode = req.mode;
    let result = tokio::task::spawn_blocking(move || run_fit(&rig, &snapshot, mode, &cfg))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("fit task failed: {e}")))??;
    let mut s = slot.state.lock().expect("session poisoned");
    s.params = result.params.clone();
    s.history.push(result.clone());
    s.dirty = false;
    app.persist(&s)?;
    drop(guard);
    Ok(Json(FitResponse {
        result,
        session: s.clone(),
    }))
}

/// Projection of the current parameters.
pub fn overlay(rig: &KinematicRig, s: &Session) -> rigfit_core::Result<Overlay> {
    let fk = rig::forward_kinematics(rig, &s.params)?;
    let joints2d = fk
        .positions
        .iter()
        .enumerate()
        .filter_map(|(id, p)| s.camera.project(*p).ok().map(|uv| Point2 { id, u: uv[0], v: uv[1] }))
        .collect();
    let bones = (0..rig.joint_count())
        .filter_map(|j| rig.parent(j).map(|p| [p, j]))
        .collect();
    let nj = rig.joint_count();
    let ids: Vec<usize> = (0..rig.vertex_count()).step_by(OVERLAY_VERTEX_STRIDE).map(|v| nj + v).collect();
    let pts = rig::keypoint_positions(rig, &s.params, &ids)?;
    let vertices2d_sample = ids
        .iter()
        .zip(pts)
        .filter_map(|(&id, p)| s.camera.project(p).ok().map(|uv| Point2 { id, u: uv[0], v: uv[1] }))
        .collect();
    Ok(Overlay {
        joints2d,
        bones,
        vertices2d_sample,
    })
}

async fn get_overlay(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Overlay>> {
    let slot = app.slot(&id)?;
    let s = slot.state.lock().expect("session poisoned").clone();
    let rig = app.rig(&s.rig_id)?;
    Ok(Json(overlay(&rig, &s)?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn cors(origin: Option<&str>) -> Result<CorsLayer, CliError> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|e| CliError::Config(format!("bad CORS origin {o:?}: {e}")))?,
        ),
        None => AllowOrigin::any(),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([header::CONTENT_TYPE]))
}

pub fn router(app: Arc<AppState>, cors: CorsLayer) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/rigs", get(list_rigs))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/keypoints", put(put_keypoints))
        .route("/v1/sessions/{id}/fit", post(fit))
        .route("/v1/sessions/{id}/overlay", get(get_overlay))
        .fallback(fallback)
        .with_state(app)
        .layer(cors)
}

pub struct ServeOptions {
    pub data_dir: PathBuf,
    pub cors_origin: Option<String>,
    pub static_dir: Option<PathBuf>,
}

pub async fn serve(host: &str, port: u16, opts: ServeOptions) -> Result<(), CliError> {
    let app = Arc::new(AppState::open(Some(&opts.data_dir))?);
    let mut router = router(app, cors(opts.cors_origin.as_deref())?);
    if let Some(dir) = &opts.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| CliError::Config(format!("cannot bind {host}:{port}: {e}")))?;
    log::info!("listening on {}", listener.local_addr().map_err(|e| CliError::Config(e.to_string()))?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Config(format!("server error: {e}")))
}
