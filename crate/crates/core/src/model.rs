//! Shared domain types and primitive geometry.
//!
//! All coordinates live in the image frame: origin top-left, x to the right,
//! y increasing downward. Every type here serializes to the canonical JSON
//! form used on disk and on the wire; boxes are `[x1, y1, x2, y2]` arrays.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("device type is empty")]
    EmptyType,
    #[error("invalid bounding box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("inventory count for {0:?} must be positive")]
    NonPositiveCount(String),
}

/// Axis-aligned box in pixel coordinates, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ModelError> {
        let coords = [x1, y1, x2, y2];
        let valid = coords.iter().all(|c| c.is_finite() && *c >= 0.0) && x1 < x2 && y1 < y2;
        if valid {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(ModelError::InvalidBox(coords))
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        bbox_center(self)
    }

    /// True when the box lies inside a `width` x `height` image.
    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x2 <= f64::from(width) && self.y2 <= f64::from(height)
    }

    /// Shifts the box by `(dx, dy)`; fails if the result leaves the positive quadrant.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, ModelError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, factor: f64) -> Result<Self, ModelError> {
        Self::new(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = ModelError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn bbox_center(b: &BBox) -> (f64, f64) {
    ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
}

/// A raw detector hit, tagged with the canonical type of the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Deserialize)]
struct RawDetection {
    label: String,
    #[serde(rename = "box")]
    bbox: BBox,
    score: f64,
}

impl TryFrom<RawDetection> for Detection {
    type Error = ModelError;

    fn try_from(r: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(&r.label, r.bbox, r.score)
    }
}

impl Detection {
    /// Builds a detection, canonicalizing the label and checking the score range.
    pub fn new(label: &str, bbox: BBox, score: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(ModelError::InvalidScore(score));
        }
        Ok(Self {
            label: canonicalize_type(label)?,
            bbox,
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub uuid: String,
    pub label: String,
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Set once the user has reviewed the record; confirmed records keep
    /// their uuid across detection refreshes.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// User-declared device types and counts, keyed by canonical type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, i64>", into = "BTreeMap<String, u32>")]
pub struct DeviceInventory {
    counts: BTreeMap<String, u32>,
}

impl DeviceInventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` devices of `raw_type`, merging synonyms into one key.
    pub fn add(&mut self, raw_type: &str, count: i64) -> Result<(), ModelError> {
        let key = canonicalize_type(raw_type)?;
        if count < 1 || count > i64::from(u32::MAX) {
            return Err(ModelError::NonPositiveCount(key));
        }
        let slot = self.counts.entry(key).or_insert(0);
        *slot = slot.saturating_add(count as u32);
        Ok(())
    }

    pub fn get(&self, canonical_type: &str) -> u32 {
        self.counts.get(canonical_type).copied().unwrap_or(0)
    }

    pub fn contains(&self, canonical_type: &str) -> bool {
        self.counts.contains_key(canonical_type)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// Types in sorted order with their counts.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }
}

impl TryFrom<BTreeMap<String, i64>> for DeviceInventory {
    type Error = ModelError;

    fn try_from(map: BTreeMap<String, i64>) -> Result<Self, Self::Error> {
        let mut inv = DeviceInventory::new();
        for (k, v) in map {
            inv.add(&k, v)?;
        }
        Ok(inv)
    }
}

impl From<DeviceInventory> for BTreeMap<String, u32> {
    fn from(inv: DeviceInventory) -> Self {
        inv.counts
    }
}

impl<S: AsRef<str>> FromIterator<(S, u32)> for DeviceInventory {
    /// Panics on blank type names; intended for literals and tests.
    fn from_iter<I: IntoIterator<Item = (S, u32)>>(iter: I) -> Self {
        let mut inv = DeviceInventory::new();
        for (k, v) in iter {
            inv.add(k.as_ref(), i64::from(v)).expect("valid inventory entry");
        }
        inv
    }
}

/// Synonym table, version 1. Keys are normalized lowercase singular forms.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("lamp", "light"),
    ("bulb", "light"),
    ("light bulb", "light"),
    ("ceiling light", "light"),
    ("ceiling fan", "fan"),
    ("air conditioner", "ac"),
    ("air conditioning", "ac"),
    ("air-conditioner", "ac"),
    ("a/c", "ac"),
    ("aircon", "ac"),
    ("television", "tv"),
    ("telly", "tv"),
    ("fridge", "refrigerator"),
    ("smart refrigerator", "refrigerator"),
    ("loudspeaker", "speaker"),
    ("space heater", "heater"),
];

/// Device types the rule-based components know by name.
pub const KNOWN_TYPES: &[&str] = &[
    "ac",
    "fan",
    "heater",
    "light",
    "refrigerator",
    "speaker",
    "thermostat",
    "tv",
];

/// Lowercases, singularizes the final word and maps synonyms
/// (`"Fans"` -> `"fan"`, `"air conditioner"` -> `"ac"`).
pub fn canonicalize_type(raw: &str) -> Result<String, ModelError> {
    let normalized = raw
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ");
    if normalized.is_empty() {
        return Err(ModelError::EmptyType);
    }
    if let Some(target) = synonym(&normalized) {
        return Ok(target.to_string());
    }
    let singular = match normalized.rsplit_once(' ') {
        Some((head, last)) => format!("{head} {}", singularize(last)),
        None => singularize(&normalized),
    };
    Ok(synonym(&singular).unwrap_or(&singular).to_string())
}

fn synonym(s: &str) -> Option<&'static str> {
    SYNONYMS.iter().find(|(k, _)| *k == s).map(|(_, v)| *v)
}

fn singularize(word: &str) -> String {
    let chars = word.chars().count();
    if chars > 4 && word.ends_with("ies") {
        return format!("{}y", &word[..word.len() - 3]);
    }
    for suffix in ["sses", "ches", "shes", "xes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    let keep = ["ss", "us", "is"].iter().any(|s| word.ends_with(s));
    if chars > 3 && word.ends_with('s') && !keep {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

/// Canonical display name: `{type}_{NN}` with a 1-based, zero-padded index.
pub fn format_device_name(label: &str, index: usize) -> String {
    format!("{label}_{index:02}")
}

/// Splits a device name such as `light_02`, `light2`, `Light-02` or
/// `light 2` into its canonical type and numeric index.
pub fn parse_device_name(name: &str) -> Option<(String, u32)> {
    let trimmed = name.trim();
    let digits_at = trimmed
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_ascii_digit())
        .last()
        .map(|(i, _)| i)?;
    let (head, digits) = trimmed.split_at(digits_at);
    let head = head.trim_end_matches(|c: char| c == '_' || c == '-' || c.is_whitespace());
    if head.is_empty() || !head.chars().all(|c| c.is_alphabetic() || c == ' ') {
        return None;
    }
    let index = digits.parse().ok()?;
    Some((canonicalize_type(head).ok()?, index))
}
