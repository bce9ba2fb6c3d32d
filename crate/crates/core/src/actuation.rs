//! Backend client: token handling, command transmission, retries.

use std::collections::BTreeMap;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;

use crate::command::{Action, ControlCommand};
use crate::model::DeviceRecord;
use crate::protocol::{
    commands_path, state_path, AuthRequest, AuthResponse, CommandRequest, CommandResponse, DeviceInfo, DeviceState,
    ErrorBody, AUTH_PATH, DEVICES_PATH, ERR_DEVICE_OFFLINE,
};

/// Cached tokens are replaced this close to expiry.
pub const TOKEN_REFRESH_MARGIN_SECS: u64 = 30;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActuationError {
    #[error("authentication rejected")]
    AuthFailure,
    #[error("device is offline")]
    DeviceOffline,
    #[error("request timed out")]
    Timeout,
    #[error("transient backend failure")]
    Transient,
    #[error("protocol error ({code}): {detail}")]
    Protocol { code: String, detail: String },
}

impl ActuationError {
    fn protocol(code: &str, detail: impl Into<String>) -> Self {
        ActuationError::Protocol {
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            ActuationError::AuthFailure => ErrorKind::AuthFailure,
            ActuationError::DeviceOffline => ErrorKind::DeviceOffline,
            ActuationError::Timeout | ActuationError::Transient => ErrorKind::Timeout,
            ActuationError::Protocol { .. } => ErrorKind::ProtocolError,
        }
    }

    fn retryable(&self) -> bool {
        matches!(self, ActuationError::Timeout | ActuationError::Transient)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    AuthFailure,
    DeviceOffline,
    Timeout,
    ProtocolError,
    UnboundDevice,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BindingError {
    #[error("backend device {0:?} is bound more than once")]
    DuplicateDeviceId(String),
    #[error("uuid {0:?} is not in the session")]
    UnknownUuid(String),
}

/// Device uuid to backend device_id; injective.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct BindingTable {
    map: BTreeMap<String, String>,
}

impl TryFrom<BTreeMap<String, String>> for BindingTable {
    type Error = BindingError;

    fn try_from(map: BTreeMap<String, String>) -> Result<Self, Self::Error> {
        let mut seen = std::collections::BTreeSet::new();
        for id in map.values() {
            if !seen.insert(id) {
                return Err(BindingError::DuplicateDeviceId(id.clone()));
            }
        }
        Ok(BindingTable { map })
    }
}

impl From<BindingTable> for BTreeMap<String, String> {
    fn from(t: BindingTable) -> Self {
        t.map
    }
}

impl BindingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, uuid: &str, device_id: &str) -> Result<(), BindingError> {
        if self.map.iter().any(|(u, d)| d == device_id && u != uuid) {
            return Err(BindingError::DuplicateDeviceId(device_id.to_string()));
        }
        self.map.insert(uuid.to_string(), device_id.to_string());
        Ok(())
    }

    pub fn unbind(&mut self, uuid: &str) -> Option<String> {
        self.map.remove(uuid)
    }

    pub fn get(&self, uuid: &str) -> Option<&str> {
        self.map.get(uuid).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Checks every bound uuid against the session records.
    pub fn validate(&self, records: &[DeviceRecord]) -> Result<(), BindingError> {
        match self.map.keys().find(|u| !records.iter().any(|r| &r.uuid == *u)) {
            Some(u) => Err(BindingError::UnknownUuid(u.clone())),
            None => Ok(()),
        }
    }

    /// Drops bindings whose uuid is no longer in the session.
    pub fn retain_records(&mut self, records: &[DeviceRecord]) {
        self.map.retain(|u, _| records.iter().any(|r| &r.uuid == u));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub token: String,
    /// Epoch seconds.
    pub expires_at: u64,
}

impl AuthToken {
    pub fn fresh_at(&self, now_secs: u64) -> bool {
        now_secs + TOKEN_REFRESH_MARGIN_SECS < self.expires_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 100,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts < 1 {
            return Err("max_attempts must be at least 1".into());
        }
        if !(self.multiplier.is_finite() && self.multiplier >= 1.0) {
            return Err(format!("multiplier {} must be finite and >= 1", self.multiplier));
        }
        Ok(())
    }

    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis((self.base_backoff_ms as f64 * factor).round() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub command: ControlCommand,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub client_id: String,
    pub secret: String,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs()
}

/// HTTP client for the device backend. Safe to share across tasks.
pub struct BackendClient {
    http: reqwest::Client,
    base_url: String,
    credentials: Credentials,
    token: Mutex<Option<AuthToken>>,
}

impl BackendClient {
    pub fn new(base_url: &str, credentials: Credentials) -> Self {
        Self::with_timeout(base_url, credentials, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, credentials: Credentials, timeout: Duration) -> Self {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("static client configuration");
        BackendClient {
            http,
            base_url: base_url.trim_end_matches('/').to_string(),
            credentials,
            token: Mutex::new(None),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Requests a new token and caches it.
    pub async fn authenticate(&self) -> Result<AuthToken, ActuationError> {
        let mut slot = self.token.lock().await;
        let token = self.request_token().await?;
        *slot = Some(token.clone());
        Ok(token)
    }

    async fn request_token(&self) -> Result<AuthToken, ActuationError> {
        let resp = self
            .http
            .post(format!("{}{AUTH_PATH}", self.base_url))
            .json(&AuthRequest {
                client_id: self.credentials.client_id.clone(),
                secret: self.credentials.secret.clone(),
            })
            .send()
            .await
            .map_err(transport_error)?;
        match resp.status() {
            StatusCode::OK => {
                let body: AuthResponse = decode(resp).await?;
                Ok(AuthToken {
                    token: body.token,
                    expires_at: now_secs() + body.expires_in,
                })
            }
            StatusCode::UNAUTHORIZED => Err(ActuationError::AuthFailure),
            other => Err(status_error(other, resp).await),
        }
    }

    /// Cached token, refreshed when within the margin of expiry.
    async fn token(&self) -> Result<String, ActuationError> {
        let mut slot = self.token.lock().await;
        if let Some(t) = slot.as_ref().filter(|t| t.fresh_at(now_secs())) {
            return Ok(t.token.clone());
        }
        let t = self.request_token().await?;
        let token = t.token.clone();
        *slot = Some(t);
        Ok(token)
    }

    async fn invalidate(&self, stale: &str) {
        let mut slot = self.token.lock().await;
        if slot.as_ref().map(|t| t.token == stale).unwrap_or(false) {
            *slot = None;
        }
    }

    /// Sends a request with the cached token; on 401 re-authenticates once.
    async fn authorized<F>(&self, build: F) -> Result<reqwest::Response, ActuationError>
    where
        F: Fn(&str) -> reqwest::RequestBuilder,
    {
        let token = self.token().await?;
        let resp = build(&token).send().await.map_err(transport_error)?;
        if resp.status() != StatusCode::UNAUTHORIZED {
            return Ok(resp);
        }
        self.invalidate(&token).await;
        let token = self.token().await?;
        let resp = build(&token).send().await.map_err(transport_error)?;
        if resp.status() == StatusCode::UNAUTHORIZED {
            return Err(ActuationError::AuthFailure);
        }
        Ok(resp)
    }

    /// One attempt; no retries.
    pub async fn send_command(&self, device_id: &str, action: Action) -> Result<CommandResponse, ActuationError> {
        let url = format!("{}{}", self.base_url, commands_path(device_id));
        let body = CommandRequest {
            commands: vec![action.into()],
        };
        let resp = self
            .authorized(|token| self.http.post(&url).bearer_auth(token).json(&body))
            .await?;
        match resp.status() {
            StatusCode::OK => {
                let body: CommandResponse = decode(resp).await?;
                if body.success {
                    Ok(body)
                } else {
                    Err(ActuationError::protocol("unsuccessful", "backend reported success=false"))
                }
            }
            StatusCode::SERVICE_UNAVAILABLE => Err(ActuationError::Transient),
            StatusCode::CONFLICT => {
                let err = error_code(resp).await;
                if err == ERR_DEVICE_OFFLINE {
                    Err(ActuationError::DeviceOffline)
                } else {
                    Err(ActuationError::protocol(&err, "409"))
                }
            }
            other => Err(status_error(other, resp).await),
        }
    }

    pub async fn query_state(&self, device_id: &str) -> Result<DeviceState, ActuationError> {
        let url = format!("{}{}", self.base_url, state_path(device_id));
        let resp = self.authorized(|token| self.http.get(&url).bearer_auth(token)).await?;
        match resp.status() {
            StatusCode::OK => decode(resp).await,
            other => Err(status_error(other, resp).await),
        }
    }

    pub async fn list_devices(&self) -> Result<Vec<DeviceInfo>, ActuationError> {
        let url = format!("{}{DEVICES_PATH}", self.base_url);
        let resp = self.authorized(|token| self.http.get(&url).bearer_auth(token)).await?;
        match resp.status() {
            StatusCode::OK => decode(resp).await,
            other => Err(status_error(other, resp).await),
        }
    }

    /// Runs commands in order. Timeouts and transient failures are retried
    /// with exponential backoff; earlier successes are never rolled back.
    pub async fn execute_all(
        &self,
        commands: &[ControlCommand],
        bindings: &BindingTable,
        policy: &RetryPolicy,
    ) -> Vec<ExecutionResult> {
        let mut results = Vec::with_capacity(commands.len());
        for cmd in commands {
            let Some(device_id) = bindings.get(&cmd.uuid) else {
                results.push(ExecutionResult {
                    command: cmd.clone(),
                    status: Status::Failed,
                    error_kind: Some(ErrorKind::UnboundDevice),
                    attempts: 0,
                    detail: Some(format!("no backend device bound to {}", cmd.uuid)),
                });
                continue;
            };
            let mut attempts = 0;
            let outcome = loop {
                attempts += 1;
                match self.send_command(device_id, cmd.action).await {
                    Ok(_) => break Ok(()),
                    Err(e) if e.retryable() && attempts < policy.max_attempts.max(1) => {
                        tracing::debug!(device_id, attempts, error = %e, "retrying");
                        tokio::time::sleep(policy.backoff(attempts)).await;
                    }
                    Err(e) => break Err(e),
                }
            };
            results.push(match outcome {
                Ok(()) => ExecutionResult {
                    command: cmd.clone(),
                    status: Status::Success,
                    error_kind: None,
                    attempts,
                    detail: None,
                },
                Err(e) => ExecutionResult {
                    command: cmd.clone(),
                    status: Status::Failed,
                    error_kind: Some(e.kind()),
                    attempts,
                    detail: Some(e.to_string()),
                },
            });
        }
        results
    }
}

fn transport_error(e: reqwest::Error) -> ActuationError {
    if e.is_timeout() || e.is_connect() {
        ActuationError::Timeout
    } else {
        ActuationError::protocol("transport", e.to_string())
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ActuationError> {
    let bytes = resp.bytes().await.map_err(transport_error)?;
    serde_json::from_slice(&bytes).map_err(|e| ActuationError::protocol("malformed", e.to_string()))
}

async fn error_code(resp: reqwest::Response) -> String {
    resp.json::<ErrorBody>()
        .await
        .map(|b| b.error)
        .unwrap_or_else(|_| "unknown".into())
}

async fn status_error(status: StatusCode, resp: reqwest::Response) -> ActuationError {
    let code = error_code(resp).await;
    ActuationError::protocol(&code, format!("HTTP {}", status.as_u16()))
}
