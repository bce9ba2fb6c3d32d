//! Simulated device fleet serving the actuation wire protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{oneshot, Mutex};
use tokio::task::JoinHandle;

use crate::model::canonicalize_type;
use crate::protocol::{
    AuthRequest, AuthResponse, CommandCode, CommandRequest, CommandResponse, DeviceInfo, DeviceState, ErrorBody,
    WireCommand, ERR_AUTH_FAILURE, ERR_BAD_REQUEST, ERR_DEVICE_OFFLINE, ERR_INVALID_VALUE, ERR_NOT_FOUND,
    ERR_TRANSIENT,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("device is offline")]
    DeviceOffline,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("duplicate device id {0:?}")]
    DuplicateDeviceId(String),
    #[error("cannot bind port {0}: {1}")]
    PortUnavailable(u16, String),
    #[error("invalid fleet config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimDevice {
    pub device_id: String,
    #[serde(rename = "type")]
    pub device_type: String,
    pub online: bool,
    pub on: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<u8>,
}

impl SimDevice {
    /// Online and off; lights at brightness 100, fans at speed 1.
    pub fn new(device_id: &str, device_type: &str) -> Self {
        SimDevice {
            device_id: device_id.to_string(),
            device_type: device_type.to_string(),
            online: true,
            on: false,
            brightness: (device_type == "light").then_some(100),
            speed: (device_type == "fan").then_some(1),
        }
    }

    pub fn state(&self) -> DeviceState {
        DeviceState {
            on: self.on,
            brightness: self.brightness,
            speed: self.speed,
            online: self.online,
        }
    }

    pub fn info(&self) -> DeviceInfo {
        DeviceInfo {
            device_id: self.device_id.clone(),
            device_type: self.device_type.clone(),
            online: self.online,
            state: self.state(),
        }
    }

    /// Applies one command; on error the state is unchanged.
    pub fn apply_command(&mut self, cmd: &WireCommand) -> Result<DeviceState, SimError> {
        if !self.online {
            return Err(SimError::DeviceOffline);
        }
        match cmd.code {
            CommandCode::SwitchOn => self.on = true,
            CommandCode::SwitchOff => self.on = false,
            CommandCode::Toggle => self.on = !self.on,
            CommandCode::SetBrightness => {
                if self.brightness.is_none() {
                    return Err(SimError::InvalidValue(format!("{} has no brightness", self.device_type)));
                }
                let level = cmd
                    .value
                    .as_u64()
                    .filter(|v| *v <= 100)
                    .ok_or_else(|| SimError::InvalidValue(format!("brightness {}", cmd.value)))?;
                self.brightness = Some(level as u8);
                self.on = level > 0;
            }
        }
        Ok(self.state())
    }
}

/// `{"devices":[{"device_id","type"}]}` plus optional credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub devices: Vec<FleetEntry>,
    #[serde(default = "default_client_id")]
    pub client_id: String,
    #[serde(default = "default_secret")]
    pub secret: String,
    #[serde(default = "default_ttl")]
    pub token_ttl_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub device_id: String,
    #[serde(rename = "type")]
    pub device_type: String,
}

fn default_client_id() -> String {
    "inot".into()
}

fn default_secret() -> String {
    "inot-secret".into()
}

fn default_ttl() -> u64 {
    3600
}

impl FleetConfig {
    pub fn new(devices: impl IntoIterator<Item = (String, String)>) -> Self {
        FleetConfig {
            devices: devices
                .into_iter()
                .map(|(device_id, device_type)| FleetEntry { device_id, device_type })
                .collect(),
            client_id: default_client_id(),
            secret: default_secret(),
            token_ttl_secs: default_ttl(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultPlan {
    /// Probability in [0, 1] that a command request fails with 503.
    #[serde(default)]
    pub transient_failure_rate: f64,
    #[serde(default)]
    pub offline_ids: BTreeSet<String>,
    #[serde(default)]
    pub auth_reject: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FaultPlan {
    pub fn transient(rate: f64, seed: u64) -> Self {
        FaultPlan {
            transient_failure_rate: rate,
            seed,
            ..Default::default()
        }
    }
}

/// Request counters, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SimStats {
    pub auth_requests: u64,
    pub command_requests: u64,
    pub transient_failures: u64,
    pub applied_commands: u64,
}

struct Fleet {
    devices: BTreeMap<String, SimDevice>,
    plan: FaultPlan,
    rng: ChaCha8Rng,
    tokens: BTreeMap<String, u64>,
    token_counter: u64,
    clock_offset_secs: i64,
    client_id: String,
    secret: String,
    ttl: u64,
    stats: SimStats,
}

impl Fleet {
    fn now_secs(&self) -> u64 {
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs() as i64;
        (wall + self.clock_offset_secs).max(0) as u64
    }

    fn check_token(&self, headers: &HeaderMap) -> bool {
        let Some(token) = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
        else {
            return false;
        };
        self.tokens.get(token).map(|exp| *exp > self.now_secs()).unwrap_or(false)
    }
}

type Shared = Arc<Mutex<Fleet>>;

fn error(status: StatusCode, code: &str) -> Response {
    (status, Json(ErrorBody { error: code.to_string() })).into_response()
}

async fn auth(State(fleet): State<Shared>, body: Result<Json<AuthRequest>, axum::extract::rejection::JsonRejection>) -> Response {
    let mut f = fleet.lock().await;
    f.stats.auth_requests += 1;
    let Ok(Json(req)) = body else {
        return error(StatusCode::BAD_REQUEST, ERR_BAD_REQUEST);
    };
    if f.plan.auth_reject || req.client_id != f.client_id || req.secret != f.secret {
        return error(StatusCode::UNAUTHORIZED, ERR_AUTH_FAILURE);
    }
    f.token_counter += 1;
    let token = format!("tok-{:08}", f.token_counter);
    let expires = f.now_secs() + f.ttl;
    f.tokens.insert(token.clone(), expires);
    Json(AuthResponse {
        token,
        expires_in: f.ttl,
    })
    .into_response()
}

async fn list_devices(State(fleet): State<Shared>, headers: HeaderMap) -> Response {
    let f = fleet.lock().await;
    if !f.check_token(&headers) {
        return error(StatusCode::UNAUTHORIZED, ERR_AUTH_FAILURE);
    }
    Json(f.devices.values().map(SimDevice::info).collect::<Vec<_>>()).into_response()
}

async fn device_state(State(fleet): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    let f = fleet.lock().await;
    if !f.check_token(&headers) {
        return error(StatusCode::UNAUTHORIZED, ERR_AUTH_FAILURE);
    }
    match f.devices.get(&id) {
        Some(d) => Json(d.state()).into_response(),
        None => error(StatusCode::NOT_FOUND, ERR_NOT_FOUND),
    }
}

async fn device_commands(
    State(fleet): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Result<Json<CommandRequest>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let mut guard = fleet.lock().await;
    let f = &mut *guard;
    f.stats.command_requests += 1;
    if !f.check_token(&headers) {
        return error(StatusCode::UNAUTHORIZED, ERR_AUTH_FAILURE);
    }
    if !f.devices.contains_key(&id) {
        return error(StatusCode::NOT_FOUND, ERR_NOT_FOUND);
    }
    let Ok(Json(req)) = body else {
        return error(StatusCode::BAD_REQUEST, ERR_BAD_REQUEST);
    };
    // Decided before touching state, so a 503 never leaves a partial write.
    let rate = f.plan.transient_failure_rate;
    if rate > 0.0 && f.rng.random::<f64>() < rate {
        f.stats.transient_failures += 1;
        return error(StatusCode::SERVICE_UNAVAILABLE, ERR_TRANSIENT);
    }
    let device = f.devices.get_mut(&id).expect("checked above");
    let mut next = device.clone();
    for cmd in &req.commands {
        match next.apply_command(cmd) {
            Ok(_) => {}
            Err(SimError::DeviceOffline) => return error(StatusCode::CONFLICT, ERR_DEVICE_OFFLINE),
            Err(_) => return error(StatusCode::BAD_REQUEST, ERR_INVALID_VALUE),
        }
    }
    *device = next;
    f.stats.applied_commands += req.commands.len() as u64;
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis() as u64;
    Json(CommandResponse { success: true, t }).into_response()
}

fn router(state: Shared) -> Router {
    Router::new()
        .route(crate::protocol::AUTH_PATH, post(auth))
        .route(crate::protocol::DEVICES_PATH, get(list_devices))
        .route("/v1/devices/{id}/state", get(device_state))
        .route("/v1/devices/{id}/commands", post(device_commands))
        .with_state(state)
}

/// A running simulator; dropping it stops the server.
pub struct SimHandle {
    addr: SocketAddr,
    fleet: Shared,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
    client_id: String,
    secret: String,
}

impl SimHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn credentials(&self) -> (String, String) {
        (self.client_id.clone(), self.secret.clone())
    }

    /// Replaces the fault plan, reseeds the fault RNG and sets each
    /// device's online flag from `offline_ids`.
    pub async fn inject_faults(&self, plan: FaultPlan) {
        let mut f = self.fleet.lock().await;
        f.rng = ChaCha8Rng::seed_from_u64(plan.seed);
        for d in f.devices.values_mut() {
            d.online = !plan.offline_ids.contains(&d.device_id);
        }
        f.plan = plan;
    }

    /// Invalidates every issued token.
    pub async fn expire_tokens(&self) {
        self.fleet.lock().await.tokens.clear();
    }

    /// Shifts the simulator's clock, which only affects token expiry.
    pub async fn advance_clock(&self, by: Duration) {
        self.fleet.lock().await.clock_offset_secs += by.as_secs() as i64;
    }

    pub async fn device(&self, device_id: &str) -> Option<SimDevice> {
        self.fleet.lock().await.devices.get(device_id).cloned()
    }

    pub async fn devices(&self) -> Vec<SimDevice> {
        self.fleet.lock().await.devices.values().cloned().collect()
    }

    pub async fn stats(&self) -> SimStats {
        self.fleet.lock().await.stats
    }

    pub async fn shutdown(mut self) {
        self.stop();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }

    /// Resolves when the server stops (for the standalone `sim` command).
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves the fleet on `127.0.0.1:port`; port 0 picks a free port.
pub async fn spawn_fleet(config: &FleetConfig, port: u16) -> Result<SimHandle, SimError> {
    let mut devices = BTreeMap::new();
    for entry in &config.devices {
        if entry.device_id.is_empty() {
            return Err(SimError::Config("empty device_id".into()));
        }
        let kind = canonicalize_type(&entry.device_type).map_err(|e| SimError::Config(e.to_string()))?;
        if devices
            .insert(entry.device_id.clone(), SimDevice::new(&entry.device_id, &kind))
            .is_some()
        {
            return Err(SimError::DuplicateDeviceId(entry.device_id.clone()));
        }
    }
    let plan = FaultPlan::default();
    let fleet = Arc::new(Mutex::new(Fleet {
        devices,
        rng: ChaCha8Rng::seed_from_u64(plan.seed),
        plan,
        tokens: BTreeMap::new(),
        token_counter: 0,
        clock_offset_secs: 0,
        client_id: config.client_id.clone(),
        secret: config.secret.clone(),
        ttl: config.token_ttl_secs,
        stats: SimStats::default(),
    }));

    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| SimError::PortUnavailable(port, e.to_string()))?;
    let addr = listener
        .local_addr()
        .map_err(|e| SimError::PortUnavailable(port, e.to_string()))?;
    let (tx, rx) = oneshot::channel();
    let app = router(fleet.clone());
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    tracing::info!(%addr, "simulator listening");
    Ok(SimHandle {
        addr,
        fleet,
        shutdown: Some(tx),
        task: Some(task),
        client_id: config.client_id.clone(),
        secret: config.secret.clone(),
    })
}
