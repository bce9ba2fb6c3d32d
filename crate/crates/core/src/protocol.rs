//! Wire types shared by the actuation client and the device simulator.
//!
//! ```text
//! POST /v1/auth                    {"client_id","secret"} -> {"token","expires_in"} | 401
//! GET  /v1/devices                 -> [{"device_id","type","online","state"}]
//! POST /v1/devices/{id}/commands   {"commands":[{"code","value"}]} -> {"success":true,"t"} | 404 | 409 | 503
//! GET  /v1/devices/{id}/state      -> {"on","brightness","online"}
//! ```
//! Authenticated routes take `Authorization: Bearer <token>`; errors carry
//! `{"error": code}` with one of the `ERR_*` codes.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::command::Action;

pub const AUTH_PATH: &str = "/v1/auth";
pub const DEVICES_PATH: &str = "/v1/devices";

pub fn commands_path(device_id: &str) -> String {
    format!("/v1/devices/{device_id}/commands")
}

pub fn state_path(device_id: &str) -> String {
    format!("/v1/devices/{device_id}/state")
}

pub const ERR_AUTH_FAILURE: &str = "auth_failure";
pub const ERR_DEVICE_OFFLINE: &str = "device_offline";
pub const ERR_NOT_FOUND: &str = "not_found";
pub const ERR_TRANSIENT: &str = "transient_failure";
pub const ERR_INVALID_VALUE: &str = "invalid_value";
pub const ERR_BAD_REQUEST: &str = "bad_request";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthRequest {
    pub client_id: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthResponse {
    pub token: String,
    /// Seconds.
    pub expires_in: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandCode {
    SwitchOn,
    SwitchOff,
    Toggle,
    SetBrightness,
}

/// `value` is a bool for the switch codes and an integer for `set_brightness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireCommand {
    pub code: CommandCode,
    pub value: Value,
}

impl From<Action> for WireCommand {
    fn from(action: Action) -> Self {
        let (code, value) = match action {
            Action::SwitchOn => (CommandCode::SwitchOn, Value::Bool(true)),
            Action::SwitchOff => (CommandCode::SwitchOff, Value::Bool(false)),
            Action::Toggle => (CommandCode::Toggle, Value::Bool(true)),
            Action::AdjustBrightness(level) => (CommandCode::SetBrightness, Value::from(level)),
        };
        WireCommand { code, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRequest {
    pub commands: Vec<WireCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandResponse {
    pub success: bool,
    /// Epoch milliseconds.
    pub t: u64,
}

/// `brightness` is present for lights only, `speed` for fans only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceState {
    pub on: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<u8>,
    pub online: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceInfo {
    pub device_id: String,
    #[serde(rename = "type")]
    pub device_type: String,
    pub online: bool,
    pub state: DeviceState,
}
