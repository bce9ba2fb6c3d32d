//! Spatial understanding of the scene.
//!
//! The geometric [`SpatialGraph`] is always computed; the natural-language
//! [`TopologyReport`] comes from a vision model when one is configured.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_device_name, BBox, DeviceRecord, Landmark};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("no devices in scene")]
    NoDevices,
    #[error("no device of type {0:?}")]
    NoSuchType(String),
    #[error("topology report is empty")]
    EmptyReport,
    #[error("near threshold {0} must lie in (0, 1)")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
    XOverlap,
    YOverlap,
    Near,
    NearestOfType,
}

impl RelationKind {
    pub fn is_horizontal(self) -> bool {
        matches!(self, Self::LeftOf | Self::RightOf | Self::XOverlap)
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Self::Above | Self::Below | Self::YOverlap)
    }
}

/// `subject kind object`; ids are record uuids or landmark names.
///
/// `metric` is the normalized center distance for `near` and
/// `nearest_of_type`, and the signed center gap (object minus subject, in
/// pixels, along the relation's axis) for the directional kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialEdge {
    pub subject_id: String,
    pub kind: RelationKind,
    pub object_id: String,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    pub edges: Vec<SpatialEdge>,
    pub image_diag: f64,
    pub image_size: [u32; 2],
}

impl SpatialGraph {
    pub fn edges_from<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a SpatialEdge> + 'a {
        self.edges.iter().filter(move |e| e.subject_id == subject)
    }

    pub fn has_edge(&self, subject: &str, kind: RelationKind, object: &str) -> bool {
        self.edges
            .iter()
            .any(|e| e.kind == kind && e.subject_id == subject && e.object_id == object)
    }

    pub fn edge(&self, subject: &str, kind: RelationKind, object: &str) -> Option<&SpatialEdge> {
        self.edges
            .iter()
            .find(|e| e.kind == kind && e.subject_id == subject && e.object_id == object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    /// Fraction of the image diagonal under which two centers are `near`.
    pub near_threshold: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { near_threshold: 0.20 }
    }
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.near_threshold > 0.0 && self.near_threshold < 1.0 {
            Ok(())
        } else {
            Err(TopologyError::InvalidThreshold(self.near_threshold))
        }
    }
}

/// Strict interval disjointness decides direction; overlapping intervals
/// are reported as overlap. y grows downward, so `above` means smaller y.
pub fn classify_pair(a: &BBox, b: &BBox) -> (RelationKind, RelationKind) {
    let horizontal = if a.x2() < b.x1() {
        RelationKind::LeftOf
    } else if a.x1() > b.x2() {
        RelationKind::RightOf
    } else {
        RelationKind::XOverlap
    };
    let vertical = if a.y2() < b.y1() {
        RelationKind::Above
    } else if a.y1() > b.y2() {
        RelationKind::Below
    } else {
        RelationKind::YOverlap
    };
    (horizontal, vertical)
}

/// `sqrt(dx² + dy²)` rather than `hypot`: sqrt is correctly rounded, so
/// equal squared distances always compare equal and ties go to the name.
fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((bx - ax) * (bx - ax) + (by - ay) * (by - ay)).sqrt()
}

struct Entity<'a> {
    id: &'a str,
    bbox: &'a BBox,
}

fn pair_edges(a: &Entity, b: &Entity, diag: f64, cfg: &TopologyConfig, out: &mut Vec<SpatialEdge>) {
    let (h, v) = classify_pair(a.bbox, b.bbox);
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    let edge = |kind, metric| SpatialEdge {
        subject_id: a.id.to_string(),
        kind,
        object_id: b.id.to_string(),
        metric,
    };
    out.push(edge(h, bx - ax));
    out.push(edge(v, by - ay));
    let dist = center_distance(a.bbox, b.bbox) / diag;
    if dist <= cfg.near_threshold {
        out.push(edge(RelationKind::Near, dist));
    }
}

/// Canonical edge order: subject, kind, object.
pub fn sort_edges(edges: &mut [SpatialEdge]) {
    edges.sort_by(|a, b| {
        a.subject_id
            .cmp(&b.subject_id)
            .then(a.kind.cmp(&b.kind))
            .then(a.object_id.cmp(&b.object_id))
    });
}

pub fn compute_graph(
    records: &[DeviceRecord],
    landmarks: &[Landmark],
    image_size: (u32, u32),
    config: &TopologyConfig,
) -> Result<SpatialGraph, TopologyError> {
    if records.is_empty() {
        return Err(TopologyError::NoDevices);
    }
    let diag = f64::from(image_size.0).hypot(f64::from(image_size.1));
    let devices: Vec<Entity> = records
        .iter()
        .map(|r| Entity { id: &r.uuid, bbox: &r.bbox })
        .collect();
    let marks: Vec<Entity> = landmarks
        .iter()
        .map(|l| Entity { id: &l.name, bbox: &l.bbox })
        .collect();

    let mut edges = Vec::new();
    for (i, a) in devices.iter().enumerate() {
        for (j, b) in devices.iter().enumerate() {
            if i != j {
                pair_edges(a, b, diag, config, &mut edges);
            }
        }
        for m in &marks {
            pair_edges(a, m, diag, config, &mut edges);
            pair_edges(m, a, diag, config, &mut edges);
        }
    }

    for (i, subject) in records.iter().enumerate() {
        let types: BTreeSet<&str> = records
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.label.as_str())
            .collect();
        for kind in types {
            let best = records
                .iter()
                .enumerate()
                .filter(|(j, r)| *j != i && r.label == kind)
                .map(|(_, r)| (center_distance(&subject.bbox, &r.bbox), r))
                .min_by(|(da, ra), (db, rb)| da.total_cmp(db).then_with(|| ra.name.cmp(&rb.name)))
                .expect("type has a candidate");
            edges.push(SpatialEdge {
                subject_id: subject.uuid.clone(),
                kind: RelationKind::NearestOfType,
                object_id: best.1.uuid.clone(),
                metric: best.0 / diag,
            });
        }
        for l in landmarks {
            edges.push(SpatialEdge {
                subject_id: subject.uuid.clone(),
                kind: RelationKind::NearestOfType,
                object_id: l.name.clone(),
                metric: center_distance(&subject.bbox, &l.bbox) / diag,
            });
        }
    }

    sort_edges(&mut edges);
    Ok(SpatialGraph {
        edges,
        image_diag: diag,
        image_size: [image_size.0, image_size.1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
}

impl Axis {
    pub fn word(self) -> &'static str {
        match self {
            Axis::Leftmost => "leftmost",
            Axis::Rightmost => "rightmost",
            Axis::Topmost => "topmost",
            Axis::Bottommost => "bottommost",
        }
    }

    /// Orders records so the most extreme comes first; ties by name.
    pub fn compare(self, a: &DeviceRecord, b: &DeviceRecord) -> Ordering {
        let (ax, ay) = a.bbox.center();
        let (bx, by) = b.bbox.center();
        let primary = match self {
            Axis::Leftmost => ax.total_cmp(&bx),
            Axis::Rightmost => bx.total_cmp(&ax),
            Axis::Topmost => ay.total_cmp(&by),
            Axis::Bottommost => by.total_cmp(&ay),
        };
        primary.then_with(|| a.name.cmp(&b.name))
    }
}

pub fn superlative<'a>(
    records: &'a [DeviceRecord],
    device_type: &str,
    axis: Axis,
) -> Result<&'a DeviceRecord, TopologyError> {
    records
        .iter()
        .filter(|r| r.label == device_type)
        .min_by(|a, b| axis.compare(a, b))
        .ok_or_else(|| TopologyError::NoSuchType(device_type.to_string()))
}

/// Request body for the vision model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyRequest {
    pub prompt: String,
    pub image_b64: String,
}

pub const REPORT_WORD_LIMIT: usize = 1000;

pub const SECTION_HEADINGS: [&str; 3] = ["Object Location", "Nearby Objects", "Spatial Relationships"];

pub fn build_topology_prompt(
    annotated_image_b64: &str,
    records: &[DeviceRecord],
    landmarks: &[Landmark],
) -> Result<TopologyRequest, TopologyError> {
    if records.is_empty() {
        return Err(TopologyError::NoDevices);
    }
    let mut objects: Vec<String> = records
        .iter()
        .map(|r| {
            let [x1, y1, x2, y2] = r.bbox.as_array();
            format!(
                "{} (uuid {}, box [{x1}, {y1}, {x2}, {y2}], score {:.2})",
                r.name, r.uuid, r.score
            )
        })
        .collect();
    objects.extend(landmarks.iter().map(|l| {
        let [x1, y1, x2, y2] = l.bbox.as_array();
        format!("{} (room feature, box [{x1}, {y1}, {x2}, {y2}])", l.name)
    }));
    let prompt = format!(
        "Analyze the provided image and the annotations [{}], ensuring the response does not exceed {REPORT_WORD_LIMIT} words.\n\
         {}: Briefly describe each device's position relative to major room features (e.g., walls, windows, doors, furniture).\n\
         {}: Identify the closest objects (IoT and non-IoT) and summarize their influence on placement.\n\
         {}: Note relative depth, alignment, and positioning concisely, prioritizing only the most relevant details.",
        objects.join("; "),
        SECTION_HEADINGS[0],
        SECTION_HEADINGS[1],
        SECTION_HEADINGS[2],
    );
    Ok(TopologyRequest {
        prompt,
        image_b64: annotated_image_b64.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub heading: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub text: String,
    pub sections: Vec<ReportSection>,
    /// Device names mentioned in the text that resolve to records.
    pub mentioned: Vec<String>,
    pub warnings: Vec<String>,
}

static NAME_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([A-Za-z]+[_\-]?\d+)\b").expect("name regex"));

static HEADING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[\s#*\-]*(object location|nearby objects|spatial relationships)[\s*]*:?[\s*]*")
        .expect("heading regex")
});

pub fn parse_topology_report(text: &str, records: &[DeviceRecord]) -> Result<TopologyReport, TopologyError> {
    if text.trim().is_empty() {
        return Err(TopologyError::EmptyReport);
    }
    let mut warnings = Vec::new();
    let words = text.split_whitespace().count();
    if words > REPORT_WORD_LIMIT {
        warnings.push(format!("report has {words} words, limit is {REPORT_WORD_LIMIT}"));
    }

    let types: BTreeSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
    let known: BTreeSet<(String, u32)> = records
        .iter()
        .filter_map(|r| parse_device_name(&r.name))
        .collect();
    let mut mentioned = BTreeSet::new();
    for m in NAME_TOKEN.find_iter(text) {
        let Some((kind, index)) = parse_device_name(m.as_str()) else {
            continue;
        };
        if !types.contains(kind.as_str()) {
            continue;
        }
        if known.contains(&(kind.clone(), index)) {
            if let Some(r) = records
                .iter()
                .find(|r| parse_device_name(&r.name) == Some((kind.clone(), index)))
            {
                mentioned.insert(r.name.clone());
            }
        } else {
            let w = format!("unresolved device name {:?}", m.as_str());
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
    }

    let marks: Vec<(usize, usize, String)> = HEADING
        .captures_iter(text)
        .map(|c| {
            let whole = c.get(0).expect("match");
            let title = c[1].to_string();
            let heading = SECTION_HEADINGS
                .iter()
                .find(|h| h.eq_ignore_ascii_case(&title))
                .map(|h| h.to_string())
                .unwrap_or(title);
            (whole.start(), whole.end(), heading)
        })
        .collect();
    let sections = marks
        .iter()
        .enumerate()
        .map(|(i, (_, body_start, heading))| {
            let end = marks.get(i + 1).map(|m| m.0).unwrap_or(text.len());
            ReportSection {
                heading: heading.clone(),
                body: text[*body_start..end].trim().to_string(),
            }
        })
        .collect();

    Ok(TopologyReport {
        text: text.to_string(),
        sections,
        mentioned: mentioned.into_iter().collect(),
        warnings,
    })
}
