//! Turning user instructions into [`ControlCommand`]s.
//!
//! Two routes: an LLM prompt whose reply is parsed by [`parse_llm_command_response`],
//! and a deterministic grammar ([`parse_spatial_command`]) resolved against
//! the spatial graph by [`resolve`].

mod grammar;
mod llm;
mod resolve;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grammar::{parse_spatial_command, to_command_text};
pub use llm::{build_command_prompt, describe_position, parse_llm_command_response, resolve_device_ref};
pub use resolve::{resolve, Candidate};

use crate::topology::Axis;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("no devices in scene")]
    NoDevices,
    #[error("cannot parse model response")]
    ParseFailure,
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("cannot parse command {0:?}")]
    UnparsableCommand(String),
    #[error("no device of type {0:?}")]
    NoSuchType(String),
    #[error("no device matches: {0}")]
    NoMatch(String),
    #[error("{} devices match; be more specific", .0.len())]
    AmbiguousTarget(Vec<Candidate>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SwitchOn,
    SwitchOff,
    Toggle,
    AdjustBrightness(u8),
}

impl Action {
    /// Normalizes action keywords (`turn-on`, `Switch On`, `adjust_brightness(40)`, ...).
    pub fn parse(raw: &str) -> Result<Action, CommandError> {
        let norm: String = raw
            .trim()
            .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
            .to_lowercase()
            .chars()
            .map(|c| if c == '-' || c.is_whitespace() { '_' } else { c })
            .collect();
        match norm.as_str() {
            "switch_on" | "turn_on" | "on" | "power_on" | "switchon" | "turnon" => return Ok(Action::SwitchOn),
            "switch_off" | "turn_off" | "off" | "power_off" | "switchoff" | "turnoff" => {
                return Ok(Action::SwitchOff)
            }
            "toggle" => return Ok(Action::Toggle),
            _ => {}
        }
        let head = norm.trim_start_matches("adjust_").trim_start_matches("set_");
        if let Some(rest) = head.strip_prefix("brightness") {
            let digits: String = rest
                .chars()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(|c| c.is_ascii_digit())
                .collect();
            if let Ok(level) = digits.parse::<u32>() {
                if level <= 100 {
                    return Ok(Action::AdjustBrightness(level as u8));
                }
            }
        }
        Err(CommandError::UnknownAction(raw.trim().to_string()))
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            Action::SwitchOn => "switch_on",
            Action::SwitchOff => "switch_off",
            Action::Toggle => "toggle",
            Action::AdjustBrightness(_) => "adjust_brightness",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::AdjustBrightness(level) => write!(f, "adjust_brightness({level})"),
            other => f.write_str(other.keyword()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub uuid: String,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityRelation {
    Near,
    LeftOf,
    RightOf,
    Above,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cardinality {
    Count(u32),
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualifier {
    Superlative(Axis),
    Proximity { relation: ProximityRelation, anchor: String },
    /// Half of the image ("on the left wall"): center-x left or right of the midline.
    Region(Side),
    Cardinality(Cardinality),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandAst {
    pub action: Action,
    pub device_type: String,
    pub qualifiers: Vec<Qualifier>,
}

impl CommandAst {
    pub fn cardinality(&self) -> Option<Cardinality> {
        self.qualifiers.iter().find_map(|q| match q {
            Qualifier::Cardinality(c) => Some(*c),
            _ => None,
        })
    }

    pub fn superlative(&self) -> Option<Axis> {
        self.qualifiers.iter().find_map(|q| match q {
            Qualifier::Superlative(a) => Some(*a),
            _ => None,
        })
    }
}
