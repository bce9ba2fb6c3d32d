//! Detection prompts and boundary-checked zero-shot detection.

use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, Detector};
use crate::model::{BBox, Detection, DeviceInventory};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("inventory is empty")]
    EmptyInventory,
    #[error("no detection prompts")]
    EmptyPrompts,
    #[error("detector timed out: {0}")]
    AdapterTimeout(String),
    #[error("detector protocol error: {0}")]
    AdapterProtocolError(String),
    #[error("cannot decode image: {0}")]
    ImageDecodeError(String),
    #[error("fixture schema violation: {0}")]
    SchemaViolation(String),
    #[error("missing fixture file {0}")]
    MissingFile(String),
}

impl From<AdapterError> for DetectionError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Timeout(m) => DetectionError::AdapterTimeout(m),
            other => DetectionError::AdapterProtocolError(other.to_string()),
        }
    }
}

/// One prompt per inventory type, ordered by type name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionPromptSet {
    pub prompts: Vec<(String, String)>,
}

/// Template table; anything absent gets `"a {type}"`.
const PROMPT_TEMPLATES: &[(&str, &str)] = &[
    ("fan", "a ceiling fan"),
    ("refrigerator", "a smart refrigerator"),
    ("tv", "a television"),
    ("ac", "an air conditioner"),
    ("thermostat", "a wall thermostat"),
    ("speaker", "a smart speaker"),
];

fn prompt_for(kind: &str, room_context: Option<&str>) -> String {
    if kind == "light" {
        return match room_context {
            Some(room) if room.trim().eq_ignore_ascii_case("kitchen") => "a kitchen light".into(),
            _ => "a light".into(),
        };
    }
    PROMPT_TEMPLATES
        .iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, p)| p.to_string())
        .unwrap_or_else(|| format!("a {kind}"))
}

pub fn build_detection_prompts(
    inventory: &DeviceInventory,
    room_context: Option<&str>,
) -> Result<DetectionPromptSet, DetectionError> {
    if inventory.is_empty() {
        return Err(DetectionError::EmptyInventory);
    }
    Ok(DetectionPromptSet {
        prompts: inventory
            .types()
            .map(|kind| (kind.to_string(), prompt_for(kind, room_context)))
            .collect(),
    })
}

/// Decodes the image header and returns `(width, height)`.
pub fn image_dimensions(image: &[u8]) -> Result<(u32, u32), DetectionError> {
    let reader = image::ImageReader::new(std::io::Cursor::new(image))
        .with_guessed_format()
        .map_err(|e| DetectionError::ImageDecodeError(e.to_string()))?;
    reader
        .into_dimensions()
        .map_err(|e| DetectionError::ImageDecodeError(e.to_string()))
}

/// Runs the detector and validates every hit at the boundary; out-of-image
/// boxes and out-of-range scores are rejected, not clamped.
///
/// Output is sorted by (type, x1, y1) so it does not depend on prompt order.
pub async fn detect(
    image: &[u8],
    prompts: &DetectionPromptSet,
    adapter: &dyn Detector,
) -> Result<Vec<Detection>, DetectionError> {
    if prompts.prompts.is_empty() {
        return Err(DetectionError::EmptyPrompts);
    }
    let (width, height) = image_dimensions(image)?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(image);
    let hits = adapter.detect(&b64, prompts).await?;

    let mut out = Vec::with_capacity(hits.len());
    for hit in hits {
        let (kind, _) = prompts.prompts.get(hit.prompt_index).ok_or_else(|| {
            DetectionError::AdapterProtocolError(format!("prompt_index {} out of range", hit.prompt_index))
        })?;
        let [x1, y1, x2, y2] = hit.bbox;
        let bbox = BBox::new(x1, y1, x2, y2)
            .map_err(|e| DetectionError::AdapterProtocolError(e.to_string()))?;
        if !bbox.within(width, height) {
            return Err(DetectionError::AdapterProtocolError(format!(
                "box {bbox} outside {width}x{height} image"
            )));
        }
        let det = Detection::new(kind, bbox, hit.score)
            .map_err(|e| DetectionError::AdapterProtocolError(e.to_string()))?;
        out.push(det);
    }
    sort_detections(&mut out);
    Ok(out)
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
            .then(a.bbox.y1().total_cmp(&b.bbox.y1()))
            .then(a.bbox.x2().total_cmp(&b.bbox.x2()))
            .then(a.bbox.y2().total_cmp(&b.bbox.y2()))
            .then(b.score.total_cmp(&a.score))
    });
}

pub fn load_fixture_detections(path: &Path) -> Result<Vec<Detection>, DetectionError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DetectionError::MissingFile(path.display().to_string()),
        _ => DetectionError::SchemaViolation(e.to_string()),
    })?;
    serde_json::from_str(&text).map_err(|e| DetectionError::SchemaViolation(e.to_string()))
}
