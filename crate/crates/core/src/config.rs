//! Service configuration (JSON).
//!
//! ```json
//! {
//!   "listen": "127.0.0.1:8080",
//!   "session_root": "sessions",
//!   "fixtures_dir": "fixtures",
//!   "endpoints": { "detector": "http://...", "onboarding_llm": null,
//!                  "topology_vlm": null, "command_llm": null, "timeout_ms": 30000 },
//!   "thresholds": { "confidence_threshold": 0.5, "alignment_epsilon": 5.0, "near_threshold": 0.2 },
//!   "backend": { "base_url": "http://...", "client_id": "...", "secret": "..." },
//!   "simulator": { "enabled": true, "fleet": "fleet.json", "port": 0, "fault_rate": 0.0, "seed": 0 },
//!   "retry": { "max_attempts": 3, "base_backoff_ms": 100, "multiplier": 2.0 }
//! }
//! ```
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::RetryPolicy;
use crate::refinement::RefinementConfig;
use crate::topology::TopologyConfig;

pub const CONFIG_ENV: &str = "INOT_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "inot.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, String),
    #[error("cannot parse config {0}: {1}")]
    Parse(PathBuf, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    #[serde(default)]
    pub detector: Option<String>,
    #[serde(default)]
    pub onboarding_llm: Option<String>,
    #[serde(default)]
    pub topology_vlm: Option<String>,
    #[serde(default)]
    pub command_llm: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for Endpoints {
    fn default() -> Self {
        Endpoints {
            detector: None,
            onboarding_llm: None,
            topology_vlm: None,
            command_llm: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub confidence_threshold: f64,
    pub alignment_epsilon: f64,
    pub near_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        let r = RefinementConfig::default();
        Thresholds {
            confidence_threshold: r.confidence_threshold,
            alignment_epsilon: r.alignment_epsilon,
            near_threshold: TopologyConfig::default().near_threshold,
        }
    }
}

impl Thresholds {
    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            confidence_threshold: self.confidence_threshold,
            alignment_epsilon: self.alignment_epsilon,
        }
    }

    pub fn topology(&self) -> TopologyConfig {
        TopologyConfig {
            near_threshold: self.near_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    pub client_id: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub enabled: bool,
    /// Fleet JSON; when absent the fleet is empty.
    pub fleet: Option<PathBuf>,
    pub port: u16,
    pub fault_rate: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            enabled: false,
            fleet: None,
            port: 0,
            fault_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_session_root")]
    pub session_root: PathBuf,
    /// Offline adapters: `detections.json` and recorded model replies.
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_session_root() -> PathBuf {
    PathBuf::from("sessions")
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            listen: default_listen(),
            session_root: default_session_root(),
            fixtures_dir: None,
            endpoints: Endpoints::default(),
            thresholds: Thresholds::default(),
            backend: None,
            simulator: SimulatorConfig {
                enabled: true,
                ..Default::default()
            },
            retry: RetryPolicy::default(),
        }
    }
}

impl AppConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: AppConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(origin.to_path_buf(), e.to_string()))?;
        if let Some(base) = origin.parent() {
            cfg.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e.to_string()))?;
        Self::from_json(&text, path)
    }

    /// Explicit path, else `$INOT_CONFIG`, else `./inot.json`.
    pub fn resolve_path(explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => PathBuf::from(DEFAULT_CONFIG_FILE),
        }
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.session_root);
        if let Some(p) = self.fixtures_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.simulator.fleet.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.thresholds
            .refinement()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.thresholds
            .topology()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.retry.validate().map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&self.simulator.fault_rate) {
            return Err(ConfigError::Invalid(format!(
                "simulator.fault_rate {} outside [0, 1]",
                self.simulator.fault_rate
            )));
        }
        if self.backend.is_none() && !self.simulator.enabled {
            return Err(ConfigError::Invalid(
                "set backend.base_url or enable the simulator".into(),
            ));
        }
        Ok(())
    }
}
