//! Turning a user's device declaration into a [`DeviceInventory`].
//!
//! Two routes produce the same structure: an LLM prompt plus a tolerant
//! response parser, and a deterministic rule-based extractor for offline use.

use std::sync::LazyLock;
use regex::Regex;
use thiserror::Error;

use crate::adapters::{AdapterError, TextModel};
use crate::model::{canonicalize_type, DeviceInventory, ModelError, KNOWN_TYPES, SYNONYMS};

#[derive(Debug, Error)]
pub enum OnboardingError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("no device mapping found in model response")]
    MalformedResponse,
    #[error("device {0:?} has a non-positive count")]
    NonPositiveCount(String),
    #[error("no devices found in input")]
    NoDevicesFound,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnboardingPrompt {
    pub text: String,
}

const PROMPT_HEADER: &str = "You are an AI assistant responsible for onboarding users into a smart IoT control system. \
Your task is to extract the number and type of IoT devices mentioned by the user in natural language input.

Rules:
1. Identify the device type (e.g., \"fan\", \"light\", \"AC\").
2. Extract the quantity of each device.
3. Ignore unrelated information and return only the structured device data.
4. Store the output as a JSON dictionary with device types as keys and their counts as values.

Example Input:
\"There are 2 fans and 1 light in this room.\"

Expected Output:
{\"fan\": 2, \"light\": 1}

User Input:
";

pub fn build_onboarding_prompt(user_text: &str) -> Result<OnboardingPrompt, OnboardingError> {
    if user_text.trim().is_empty() {
        return Err(OnboardingError::EmptyInput);
    }
    Ok(OnboardingPrompt {
        text: format!("{PROMPT_HEADER}{user_text}"),
    })
}

/// Extracts the user utterance from a prompt built by [`build_onboarding_prompt`].
pub fn utterance_of(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(PROMPT_HEADER)
}

static PAIR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^\s*"([^"]+)"\s*:\s*(-?\d+)\s*$"#).expect("pair regex"));

/// Finds the first `{"type": n, ...}` (or `["type": n, ...]`) mapping in free text.
pub fn parse_inventory_response(llm_text: &str) -> Result<DeviceInventory, OnboardingError> {
    for (start, open) in llm_text.char_indices().filter(|(_, c)| *c == '{' || *c == '[') {
        let close = if open == '{' { '}' } else { ']' };
        let rest = &llm_text[start + 1..];
        let Some(end) = rest.find(close) else {
            continue;
        };
        if let Some(entries) = parse_pairs(&rest[..end]) {
            let mut inv = DeviceInventory::new();
            for (key, count) in entries {
                inv.add(&key, count).map_err(|e| match e {
                    ModelError::NonPositiveCount(k) => OnboardingError::NonPositiveCount(k),
                    _ => OnboardingError::MalformedResponse,
                })?;
            }
            return Ok(inv);
        }
    }
    Err(OnboardingError::MalformedResponse)
}

fn parse_pairs(body: &str) -> Option<Vec<(String, i64)>> {
    if body.trim().is_empty() {
        return None;
    }
    body.split(',')
        .map(|entry| {
            let caps = PAIR.captures(entry)?;
            let key = caps[1].trim();
            if key.is_empty() {
                return None;
            }
            Some((key.to_string(), caps[2].parse().ok()?))
        })
        .collect()
}

/// Runs the LLM route end to end.
pub async fn extract_inventory_llm(
    user_text: &str,
    model: &dyn TextModel,
) -> Result<DeviceInventory, OnboardingError> {
    let prompt = build_onboarding_prompt(user_text)?;
    let reply = model.complete(&prompt.text).await?;
    parse_inventory_response(&reply)
}

const NUMBER_WORDS: &[(&str, i64)] = &[
    ("one", 1),
    ("two", 2),
    ("three", 3),
    ("four", 4),
    ("five", 5),
    ("six", 6),
    ("seven", 7),
    ("eight", 8),
    ("nine", 9),
    ("ten", 10),
];

/// Maximum distance, in tokens, between a count and the noun it quantifies.
const COUNT_WINDOW: usize = 2;

fn number_value(token: &str) -> Option<i64> {
    if !token.is_empty() && token.chars().all(|c| c.is_ascii_digit()) {
        return token.parse().ok();
    }
    NUMBER_WORDS.iter().find(|(w, _)| *w == token).map(|(_, n)| *n)
}

/// Longest vocabulary noun starting at `tokens[i]`: (canonical type, tokens consumed).
fn vocabulary_noun(tokens: &[String], i: usize) -> Option<(String, usize)> {
    for len in (1..=2).rev() {
        if i + len > tokens.len() {
            continue;
        }
        let phrase = tokens[i..i + len].join(" ");
        let Ok(canonical) = canonicalize_type(&phrase) else {
            continue;
        };
        let multiword_synonym = len > 1 && SYNONYMS.iter().any(|(_, v)| *v == canonical);
        if (len == 1 && KNOWN_TYPES.contains(&canonical.as_str())) || multiword_synonym {
            return Some((canonical, len));
        }
    }
    None
}

/// Deterministic English-only extractor: a count (digits or `one`..`ten`)
/// at most two tokens before a known device noun; bare nouns count once and
/// repeated mentions add up.
pub fn extract_inventory_rulebased(user_text: &str) -> Result<DeviceInventory, OnboardingError> {
    if user_text.trim().is_empty() {
        return Err(OnboardingError::EmptyInput);
    }
    let tokens: Vec<String> = user_text
        .split(|c: char| !(c.is_alphanumeric() || c == '/' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();

    let mut inv = DeviceInventory::new();
    let mut i = 0;
    // Index just past the previous noun; counts never reach across another noun.
    let mut barrier = 0;
    while i < tokens.len() {
        let Some((kind, consumed)) = vocabulary_noun(&tokens, i) else {
            i += 1;
            continue;
        };
        let lookback_start = i.saturating_sub(COUNT_WINDOW).max(barrier);
        let count = (lookback_start..i)
            .rev()
            .find_map(|j| number_value(&tokens[j]))
            .unwrap_or(1);
        inv.add(&kind, count)
            .map_err(|_| OnboardingError::NonPositiveCount(kind.clone()))?;
        i += consumed;
        barrier = i;
    }
    if inv.is_empty() {
        Err(OnboardingError::NoDevicesFound)
    } else {
        Ok(inv)
    }
}
