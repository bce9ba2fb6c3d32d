//! HTTP API over the session pipeline.
//!
//! ```text
//! POST /api/sessions                          -> {"session_id"}
//! GET  /api/sessions                          -> {"sessions":[id]}
//! GET  /api/sessions/{id}                     -> session metadata
//! POST /api/sessions/{id}/inventory           {"text","mode"?} -> {"inventory"}
//! POST /api/sessions/{id}/image               image bytes -> annotations view
//! GET  /api/sessions/{id}/annotations         -> annotations view
//! PUT  /api/sessions/{id}/annotations         {"records":[...],"landmarks"?} -> annotations view
//! POST /api/sessions/{id}/annotations/refresh -> annotations view
//! GET  /api/sessions/{id}/bindings            -> {"bindings"}
//! PUT  /api/sessions/{id}/bindings            {"bindings":{uuid|name: device_id}} -> {"bindings"}
//! GET  /api/sessions/{id}/topology            -> {"graph","report"}
//! POST /api/sessions/{id}/topology            {"mode"?} -> {"graph","report"}
//! POST /api/sessions/{id}/command             {"text","mode"?,"dry_run"?} | {"uuid","action"} -> {"commands","results"}
//! GET  /api/devices                           -> {"devices"}
//! GET  /static/{id}/annotated.png
//! ```
//! Errors are `{"error": kind, "detail": text}`; `AmbiguousTarget` also
//! carries `"candidates"`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{Mutex, OwnedMutexGuard};

use crate::actuation::{BackendClient, Credentials, ExecutionResult, RetryPolicy};
use crate::command::{Action, Candidate, CommandError, ControlCommand};
use crate::config::{AppConfig, ConfigError};
use crate::pipeline::{self, AnnotationUpdate, Engines, Mode, PipelineError};
use crate::session::{RoomSession, SessionStore, StoreError};
use crate::sim::{spawn_fleet, FaultPlan, FleetConfig, SimError, SimHandle};

pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Simulator(#[from] SimError),
    #[error("cannot listen on {0}: {1}")]
    Listen(String, String),
}

/// Shared state behind the router.
pub struct AppState {
    pub store: SessionStore,
    pub engines: Engines,
    pub backend: Option<Arc<BackendClient>>,
    pub retry: RetryPolicy,
    locks: std::sync::Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AppState {
    pub fn new(
        store: SessionStore,
        engines: Engines,
        backend: Option<Arc<BackendClient>>,
        retry: RetryPolicy,
    ) -> Self {
        AppState {
            store,
            engines,
            backend,
            retry,
            locks: Default::default(),
        }
    }

    /// Serializes requests within one session.
    async fn lock(&self, id: &str) -> OwnedMutexGuard<()> {
        let m = {
            let mut locks = self.locks.lock().expect("lock table poisoned");
            locks.entry(id.to_string()).or_default().clone()
        };
        m.lock_owned().await
    }
}

/// Builds state from config, starting the in-process simulator when enabled.
pub async fn build_state(cfg: &AppConfig) -> Result<(Arc<AppState>, Option<SimHandle>), ServiceError> {
    let store = SessionStore::open(&cfg.session_root)?;
    let engines = Engines::from_config(cfg)?;
    let (backend, sim) = if cfg.simulator.enabled {
        let fleet = match &cfg.simulator.fleet {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::Io(path.clone(), e.to_string()))?;
                FleetConfig::from_json(&text)?
            }
            None => FleetConfig::new([]),
        };
        let sim = spawn_fleet(&fleet, cfg.simulator.port).await?;
        if cfg.simulator.fault_rate > 0.0 {
            sim.inject_faults(FaultPlan::transient(cfg.simulator.fault_rate, cfg.simulator.seed))
                .await;
        }
        let (client_id, secret) = sim.credentials();
        let client = BackendClient::new(&sim.base_url(), Credentials { client_id, secret });
        (Some(Arc::new(client)), Some(sim))
    } else {
        let backend = cfg.backend.as_ref().map(|b| {
            Arc::new(BackendClient::new(
                &b.base_url,
                Credentials {
                    client_id: b.client_id.clone(),
                    secret: b.secret.clone(),
                },
            ))
        });
        (backend, None)
    };
    Ok((Arc::new(AppState::new(store, engines, backend, cfg.retry)), sim))
}

/// Binds `cfg.listen` and serves until Ctrl-C.
pub async fn serve(cfg: &AppConfig) -> Result<(), ServiceError> {
    let (state, sim) = build_state(cfg).await?;
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| ServiceError::Listen(cfg.listen.clone(), e.to_string()))?;
    let addr = listener
        .local_addr()
        .map_err(|e| ServiceError::Listen(cfg.listen.clone(), e.to_string()))?;
    if let Some(sim) = &sim {
        tracing::info!(simulator = %sim.base_url(), "simulator running");
    }
    tracing::info!(%addr, "service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Listen(addr.to_string(), e.to_string()))?;
    drop(sim);
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/inventory", post(post_inventory))
        .route("/api/sessions/{id}/image", post(post_image))
        .route("/api/sessions/{id}/annotations", get(get_annotations).put(put_annotations))
        .route("/api/sessions/{id}/annotations/refresh", post(refresh_annotations))
        .route("/api/sessions/{id}/bindings", get(get_bindings).put(put_bindings))
        .route("/api/sessions/{id}/topology", get(get_topology).post(post_topology))
        .route("/api/sessions/{id}/command", post(post_command))
        .route("/api/devices", get(get_devices))
        .route("/static/{id}/annotated.png", get(annotated_png))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    detail: String,
    candidates: Option<Vec<Candidate>>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            kind: kind.to_string(),
            detail: detail.into(),
            candidates: None,
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", detail)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let kind = e.kind();
        let status = match kind {
            "SessionNotFound" => StatusCode::NOT_FOUND,
            "AmbiguousTarget" | "NotReady" | "SessionExists" | "DuplicateBinding" => StatusCode::CONFLICT,
            "AdapterTimeout" => StatusCode::GATEWAY_TIMEOUT,
            "AdapterProtocolError" | "MissingFixture" | "AdapterIoError" | "MalformedResponse" | "ParseFailure" => {
                StatusCode::BAD_GATEWAY
            }
            "StorageError" | "CorruptSession" | "EncodeError" => StatusCode::INTERNAL_SERVER_ERROR,
            "NoMatch" | "NoSuchType" | "UnknownDevice" | "UnknownAction" | "UnparsableCommand" | "NoDevices" => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::BAD_REQUEST,
        };
        let candidates = match &e {
            PipelineError::Command(CommandError::AmbiguousTarget(c)) => Some(c.clone()),
            _ => None,
        };
        ApiError {
            status,
            kind: kind.to_string(),
            detail: e.to_string(),
            candidates,
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        PipelineError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind, "detail": self.detail });
        if let Some(c) = self.candidates {
            body["candidates"] = json!(c);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Empty bodies parse as `{}` so optional-only requests may omit them.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(raw).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn annotations_view(session: &RoomSession) -> Value {
    json!({
        "session_id": session.id(),
        "image_size": session.image_size().map(|(w, h)| [w, h]),
        "records": session.records,
        "landmarks": session.landmarks,
        "annotated_url": session.meta.image.as_ref().map(|_| format!("/static/{}/annotated.png", session.id())),
    })
}

async fn create_session(State(st): State<Arc<AppState>>) -> ApiResult {
    let s = st.store.create()?;
    Ok(Json(json!({ "session_id": s.id() })))
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> ApiResult {
    Ok(Json(json!({ "sessions": st.store.list()? })))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let _g = st.lock(&id).await;
    let s = st.store.load(&id)?;
    Ok(Json(json!({
        "session_id": s.id(),
        "inventory": s.meta.inventory,
        "image_size": s.image_size().map(|(w, h)| [w, h]),
        "records": s.records.len(),
        "landmarks": s.landmarks.len(),
        "bindings": s.bindings.len(),
        "has_graph": s.graph.is_some(),
        "has_report": s.topology.is_some(),
    })))
}

#[derive(Deserialize)]
struct InventoryBody {
    text: String,
    #[serde(default)]
    mode: Mode,
}

async fn post_inventory(State(st): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult {
    let req: InventoryBody = body(&bytes)?;
    let _g = st.lock(&id).await;
    let mut s = st.store.load(&id)?;
    let inventory = pipeline::set_inventory(&st.store, &mut s, &req.text, req.mode, &st.engines).await?;
    Ok(Json(json!({ "inventory": inventory })))
}

async fn post_image(State(st): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult {
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty image body"));
    }
    let _g = st.lock(&id).await;
    let mut s = st.store.load(&id)?;
    pipeline::ingest_image(&st.store, &mut s, &bytes, &st.engines).await?;
    Ok(Json(annotations_view(&s)))
}

async fn get_annotations(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let _g = st.lock(&id).await;
    let s = st.store.load(&id)?;
    Ok(Json(annotations_view(&s)))
}

async fn put_annotations(State(st): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult {
    let update: AnnotationUpdate = body(&bytes)?;
    let _g = st.lock(&id).await;
    let mut s = st.store.load(&id)?;
    pipeline::apply_annotations(&st.store, &mut s, update, &st.engines)?;
    Ok(Json(annotations_view(&s)))
}

async fn refresh_annotations(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let _g = st.lock(&id).await;
    let mut s = st.store.load(&id)?;
    pipeline::run_detection(&st.store, &mut s, &st.engines).await?;
    Ok(Json(annotations_view(&s)))
}

async fn get_bindings(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let _g = st.lock(&id).await;
    let s = st.store.load(&id)?;
    Ok(Json(json!({ "bindings": s.bindings })))
}

/// Accepts `{"bindings": {...}}` or the bare map.
#[derive(Deserialize)]
#[serde(untagged)]
enum BindingsBody {
    Wrapped { bindings: BTreeMap<String, String> },
    Bare(BTreeMap<String, String>),
}

async fn put_bindings(State(st): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult {
    let map = match body::<BindingsBody>(&bytes)? {
        BindingsBody::Wrapped { bindings } | BindingsBody::Bare(bindings) => bindings,
    };
    let _g = st.lock(&id).await;
    let mut s = st.store.load(&id)?;
    pipeline::set_bindings(&st.store, &mut s, &map)?;
    Ok(Json(json!({ "bindings": s.bindings })))
}

async fn get_topology(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let _g = st.lock(&id).await;
    let s = st.store.load(&id)?;
    Ok(Json(json!({ "graph": s.graph, "report": s.topology })))
}

#[derive(Deserialize, Default)]
struct ModeBody {
    #[serde(default)]
    mode: Mode,
}

async fn post_topology(State(st): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult {
    let req: ModeBody = body(&bytes)?;
    let _g = st.lock(&id).await;
    let mut s = st.store.load(&id)?;
    let report = pipeline::run_topology(&st.store, &mut s, req.mode, &st.engines).await?;
    Ok(Json(json!({ "graph": s.graph, "report": report })))
}

#[derive(Deserialize)]
struct CommandBody {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    mode: Mode,
    #[serde(default)]
    dry_run: bool,
    /// Direct form, used after disambiguation.
    #[serde(default)]
    uuid: Option<String>,
    #[serde(default)]
    action: Option<Value>,
}

fn direct_action(v: &Value) -> Result<Action, ApiError> {
    match v {
        Value::String(s) => Ok(Action::parse(s)?),
        other => serde_json::from_value(other.clone()).map_err(|e| ApiError::bad_request(format!("invalid action: {e}"))),
    }
}

#[derive(Serialize)]
struct CommandReply {
    commands: Vec<ControlCommand>,
    results: Vec<ExecutionResult>,
}

async fn post_command(State(st): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult {
    let req: CommandBody = body(&bytes)?;
    let _g = st.lock(&id).await;
    let s = st.store.load(&id)?;
    let commands = match (&req.text, &req.uuid, &req.action) {
        (Some(text), None, None) => pipeline::resolve_command(&s, text, req.mode, &st.engines).await?,
        (None, Some(uuid), Some(action)) => {
            if !s.records.iter().any(|r| &r.uuid == uuid) {
                return Err(CommandError::UnknownDevice(uuid.clone()).into());
            }
            vec![ControlCommand {
                uuid: uuid.clone(),
                action: direct_action(action)?,
            }]
        }
        _ => return Err(ApiError::bad_request("send either \"text\" or \"uuid\" with \"action\"")),
    };
    let results = match (&st.backend, req.dry_run) {
        (Some(client), false) => client.execute_all(&commands, &s.bindings, &st.retry).await,
        _ => Vec::new(),
    };
    Ok(Json(json!(CommandReply { commands, results })))
}

async fn get_devices(State(st): State<Arc<AppState>>) -> ApiResult {
    let client = st
        .backend
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "NoBackend", "no backend configured"))?;
    let devices = client.list_devices().await.map_err(|e| {
        let kind = format!("{:?}", e.kind());
        ApiError::new(StatusCode::BAD_GATEWAY, &kind, e.to_string())
    })?;
    Ok(Json(json!({ "devices": devices })))
}

async fn annotated_png(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = st.store.annotated_path(&id)?;
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(_) => Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no annotated image yet")),
    }
}
