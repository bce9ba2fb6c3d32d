use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use crate::model::{format_device_name, parse_device_name, DeviceRecord, Landmark};
use crate::topology::{Axis, RelationKind, SpatialGraph, TopologyReport};

use super::{Action, CommandError, ControlCommand};

const FORMAT_CLAUSE: &str = "[UUID: device-uuid, Action: action]";

/// Coarse placement by image thirds plus landmark proximity and superlative
/// flags, e.g. `top-left corner, near window, leftmost light`.
pub fn describe_position(
    record: &DeviceRecord,
    records: &[DeviceRecord],
    landmarks: &[Landmark],
    graph: &SpatialGraph,
) -> String {
    let [w, h] = graph.image_size;
    let (cx, cy) = record.bbox.center();
    let third = |v: f64, extent: u32| {
        let t = f64::from(extent.max(1)) / 3.0;
        if v < t {
            0
        } else if v < 2.0 * t {
            1
        } else {
            2
        }
    };
    let region = match (third(cy, h), third(cx, w)) {
        (0, 0) => "top-left corner",
        (0, 1) => "top center",
        (0, _) => "top-right corner",
        (1, 0) => "left side",
        (1, 1) => "center",
        (1, _) => "right side",
        (_, 0) => "bottom-left corner",
        (_, 1) => "bottom center",
        _ => "bottom-right corner",
    };
    let mut parts = vec![region.to_string()];
    for l in landmarks {
        let rel = if graph.has_edge(&record.uuid, RelationKind::Near, &l.name) {
            "near"
        } else {
            "far from"
        };
        parts.push(format!("{rel} {}", l.name));
    }
    let same_type: Vec<&DeviceRecord> = records.iter().filter(|r| r.label == record.label).collect();
    if same_type.len() > 1 {
        for axis in [Axis::Leftmost, Axis::Rightmost, Axis::Topmost, Axis::Bottommost] {
            let extreme = same_type.iter().min_by(|a, b| axis.compare(a, b));
            if extreme.map(|r| r.uuid == record.uuid).unwrap_or(false) {
                parts.push(format!("{} {}", axis.word(), record.label));
            }
        }
    }
    parts.join(", ")
}

pub fn build_command_prompt(
    user_text: &str,
    records: &[DeviceRecord],
    landmarks: &[Landmark],
    graph: &SpatialGraph,
    report: Option<&TopologyReport>,
) -> Result<String, CommandError> {
    if records.is_empty() {
        return Err(CommandError::NoDevices);
    }
    let mut out = format!("User Command: \"{}\"\n\nDevice List:\n", user_text.trim());
    for r in records {
        out.push_str(&format!(
            "UUID: {}, Position: {}, Name: {}.\n",
            r.uuid,
            describe_position(r, records, landmarks, graph),
            r.name
        ));
    }
    if let Some(report) = report {
        out.push_str("\nSpatial Context:\n");
        out.push_str(report.text.trim());
        out.push('\n');
    }
    out.push_str(
        "\nBased on the spatial information and user intent, identify the most appropriate device(s) \
         and generate a control command in the following format:\n",
    );
    out.push_str(FORMAT_CLAUSE);
    out.push_str(
        "\nUse one line per device. Action is one of switch_on, switch_off, toggle, adjust_brightness(N) with N in 0-100.\n\
         \nEnsure your response is concise and contextually accurate.\n",
    );
    Ok(out)
}

/// Exact uuid, then exact name, then a loose name (`light2`, `Light-02`).
pub fn resolve_device_ref<'a>(raw: &str, records: &'a [DeviceRecord]) -> Result<&'a DeviceRecord, CommandError> {
    let key = raw.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '<' || c == '>');
    if let Some(r) = records.iter().find(|r| r.uuid == key) {
        return Ok(r);
    }
    if let Some(r) = records.iter().find(|r| r.name.eq_ignore_ascii_case(key)) {
        return Ok(r);
    }
    if let Some((label, idx)) = parse_device_name(key) {
        let name = format_device_name(&label, idx as usize);
        if let Some(r) = records.iter().find(|r| r.name == name) {
            return Ok(r);
        }
    }
    Err(CommandError::UnknownDevice(key.to_string()))
}

static BRACKET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\[\s*uuid\s*:\s*([^,\]\n]+?)\s*,\s*action\s*:\s*([^\]\n]+?)\s*\]").expect("valid regex")
});

/// Accepts repeated `[UUID: X, Action: Y]` lines, or JSON objects with
/// `device`/`uuid` and `command`/`action` keys (bare, in a list, under
/// `"commands"`, or inside a code fence).
pub fn parse_llm_command_response(text: &str, records: &[DeviceRecord]) -> Result<Vec<ControlCommand>, CommandError> {
    let pairs: Vec<(String, String)> = BRACKET
        .captures_iter(text)
        .map(|c| (c[1].to_string(), c[2].to_string()))
        .collect();
    let pairs = if pairs.is_empty() { json_pairs(text) } else { pairs };
    if pairs.is_empty() {
        return Err(CommandError::ParseFailure);
    }
    pairs
        .iter()
        .map(|(device, action)| {
            let record = resolve_device_ref(device, records)?;
            Ok(ControlCommand {
                uuid: record.uuid.clone(),
                action: Action::parse(action)?,
            })
        })
        .collect()
}

fn json_pairs(text: &str) -> Vec<(String, String)> {
    let stripped = strip_fences(text);
    if let Ok(v) = serde_json::from_str::<Value>(stripped) {
        let mut out = Vec::new();
        collect(&v, &mut out);
        if !out.is_empty() {
            return out;
        }
    }
    let mut out = Vec::new();
    for chunk in balanced_chunks(stripped) {
        if let Ok(v) = serde_json::from_str::<Value>(chunk) {
            collect(&v, &mut out);
        }
    }
    out
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

fn collect(v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Array(items) => items.iter().for_each(|i| collect(i, out)),
        Value::Object(map) => {
            if let Some(inner) = map.get("commands") {
                collect(inner, out);
                return;
            }
            let device = ["device", "uuid", "device_id", "name"]
                .iter()
                .find_map(|k| map.get(*k).and_then(Value::as_str));
            let action = ["command", "action"].iter().find_map(|k| map.get(*k));
            let (Some(device), Some(action)) = (device, action) else {
                return;
            };
            let action = match action {
                Value::String(s) => {
                    let level = ["level", "brightness", "value"]
                        .iter()
                        .find_map(|k| map.get(*k).and_then(Value::as_u64));
                    match level {
                        Some(n) if !s.chars().any(|c| c.is_ascii_digit()) => format!("{s}({n})"),
                        _ => s.clone(),
                    }
                }
                other => other.to_string(),
            };
            out.push((device.to_string(), action));
        }
        _ => {}
    }
}

/// Top-level `{...}` and `[...]` spans, skipping brackets inside strings.
fn balanced_chunks(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut stack: Vec<char> = Vec::new();
    let mut start = 0;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' if !stack.is_empty() => in_str = true,
            '{' | '[' => {
                if stack.is_empty() {
                    start = i;
                }
                stack.push(if c == '{' { '}' } else { ']' });
            }
            '}' | ']' => {
                if stack.last() == Some(&c) {
                    stack.pop();
                    if stack.is_empty() {
                        chunks.push(&text[start..i + 1]);
                    }
                } else {
                    stack.clear();
                }
            }
            _ => {}
        }
    }
    chunks
}
