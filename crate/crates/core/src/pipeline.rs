//! Session-level orchestration of the stages: inventory, detection and
//! refinement, rendering, topology, command resolution.
//!
//! Every stage mutates a [`RoomSession`] and persists it before returning,
//! so a restart between stages resumes from identical state.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{BindingError, BindingTable};
use crate::adapters::{
    AdapterError, Detector, FixtureDetector, FixtureTextModel, HttpDetector, HttpEndpoint, HttpTextModel,
    HttpVisionModel, TextModel, VisionModel,
};
use crate::command::{
    build_command_prompt, describe_position, parse_llm_command_response, parse_spatial_command, resolve,
    CommandError, ControlCommand,
};
use crate::config::AppConfig;
use crate::detection::{build_detection_prompts, detect, image_dimensions, DetectionError};
use crate::model::{canonicalize_type, BBox, DeviceInventory, DeviceRecord, Landmark, ModelError};
use crate::onboarding::{extract_inventory_llm, extract_inventory_rulebased, OnboardingError};
use crate::refinement::{refine_with_confirmed, rename_records, RefinementConfig, RefinementError, UuidSource};
use crate::session::{RoomSession, SessionStore, StoreError};
use crate::topology::{
    build_topology_prompt, classify_pair, compute_graph, parse_topology_report, RelationKind, SpatialGraph,
    TopologyConfig, TopologyError, TopologyReport, SECTION_HEADINGS,
};
use crate::visualizer::{assign_colors, encode_base64, render_annotations, RenderOptions, VisualizerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Onboarding(#[from] OnboardingError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Refinement(#[from] RefinementError),
    #[error(transparent)]
    Visualizer(#[from] VisualizerError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    NotReady(String),
    #[error("mode {0:?} needs a configured model endpoint")]
    ModeUnavailable(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        use PipelineError as P;
        match self {
            P::Onboarding(OnboardingError::EmptyInput) => "EmptyInput",
            P::Onboarding(OnboardingError::MalformedResponse) => "MalformedResponse",
            P::Onboarding(OnboardingError::NonPositiveCount(_)) => "NonPositiveCount",
            P::Onboarding(OnboardingError::NoDevicesFound) => "NoDevicesFound",
            P::Onboarding(OnboardingError::Adapter(e)) | P::Adapter(e) => adapter_kind(e),
            P::Detection(e) => match e {
                DetectionError::EmptyInventory => "EmptyInventory",
                DetectionError::EmptyPrompts => "EmptyPrompts",
                DetectionError::AdapterTimeout(_) => "AdapterTimeout",
                DetectionError::AdapterProtocolError(_) => "AdapterProtocolError",
                DetectionError::ImageDecodeError(_) => "ImageDecodeError",
                DetectionError::SchemaViolation(_) => "SchemaViolation",
                DetectionError::MissingFile(_) => "MissingFile",
            },
            P::Refinement(_) => "InvalidThreshold",
            P::Visualizer(e) => match e {
                VisualizerError::ImageDecodeError(_) => "ImageDecodeError",
                VisualizerError::BoxOutOfBounds(..) => "BoxOutOfBounds",
                VisualizerError::Encode(_) => "EncodeError",
                VisualizerError::EmptyPayload => "EmptyPayload",
            },
            P::Topology(e) => match e {
                TopologyError::NoDevices => "NoDevices",
                TopologyError::NoSuchType(_) => "NoSuchType",
                TopologyError::EmptyReport => "EmptyReport",
                TopologyError::InvalidThreshold(_) => "InvalidThreshold",
            },
            P::Command(e) => match e {
                CommandError::NoDevices => "NoDevices",
                CommandError::ParseFailure => "ParseFailure",
                CommandError::UnknownDevice(_) => "UnknownDevice",
                CommandError::UnknownAction(_) => "UnknownAction",
                CommandError::UnparsableCommand(_) => "UnparsableCommand",
                CommandError::NoSuchType(_) => "NoSuchType",
                CommandError::NoMatch(_) => "NoMatch",
                CommandError::AmbiguousTarget(_) => "AmbiguousTarget",
            },
            P::Store(e) => match e {
                StoreError::InvalidId(_) | StoreError::NotFound(_) => "SessionNotFound",
                StoreError::Exists(_) => "SessionExists",
                StoreError::Io(..) => "StorageError",
                StoreError::Corrupt(..) => "CorruptSession",
            },
            P::Binding(BindingError::DuplicateDeviceId(_)) => "DuplicateBinding",
            P::Binding(BindingError::UnknownUuid(_)) => "UnknownDevice",
            P::Model(_) => "InvalidInput",
            P::NotReady(_) => "NotReady",
            P::ModeUnavailable(_) => "ModeUnavailable",
            P::InvalidAnnotation(_) => "InvalidAnnotation",
        }
    }
}

fn adapter_kind(e: &AdapterError) -> &'static str {
    match e {
        AdapterError::Timeout(_) => "AdapterTimeout",
        AdapterError::Protocol(_) => "AdapterProtocolError",
        AdapterError::MissingFixture(_) => "MissingFixture",
        AdapterError::Io(_) => "AdapterIoError",
    }
}

/// `deterministic` needs no model; `llm` (alias `vlm`) calls the configured endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Deterministic,
    #[serde(alias = "vlm")]
    Llm,
}

/// Model adapters and thresholds shared by all sessions.
#[derive(Clone, Default)]
pub struct Engines {
    pub detector: Option<Arc<dyn Detector>>,
    pub onboarding_llm: Option<Arc<dyn TextModel>>,
    pub topology_vlm: Option<Arc<dyn VisionModel>>,
    pub command_llm: Option<Arc<dyn TextModel>>,
    pub refinement: RefinementConfig,
    pub topology: TopologyConfig,
}

pub const FIXTURE_DETECTIONS_FILE: &str = "detections.json";

impl Engines {
    /// HTTP adapters for configured endpoints; otherwise fixture adapters
    /// from `fixtures_dir` when present.
    pub fn from_config(cfg: &AppConfig) -> Result<Self, PipelineError> {
        let mut engines = Engines {
            refinement: cfg.thresholds.refinement(),
            topology: cfg.thresholds.topology(),
            ..Default::default()
        };
        if let Some(dir) = &cfg.fixtures_dir {
            engines = engines.with_fixtures(dir)?;
        }
        let timeout = Duration::from_millis(cfg.endpoints.timeout_ms);
        let ep = |url: &String| HttpEndpoint::new(url.clone(), timeout);
        if let Some(url) = &cfg.endpoints.detector {
            engines.detector = Some(Arc::new(HttpDetector(ep(url)?)));
        }
        if let Some(url) = &cfg.endpoints.onboarding_llm {
            engines.onboarding_llm = Some(Arc::new(HttpTextModel(ep(url)?)));
        }
        if let Some(url) = &cfg.endpoints.topology_vlm {
            engines.topology_vlm = Some(Arc::new(HttpVisionModel(ep(url)?)));
        }
        if let Some(url) = &cfg.endpoints.command_llm {
            engines.command_llm = Some(Arc::new(HttpTextModel(ep(url)?)));
        }
        Ok(engines)
    }

    /// Replays `dir/detections.json` and recorded model replies from `dir`.
    pub fn with_fixtures(mut self, dir: &Path) -> Result<Self, PipelineError> {
        let detections = dir.join(FIXTURE_DETECTIONS_FILE);
        if detections.is_file() {
            self.detector = Some(Arc::new(FixtureDetector::from_file(&detections)?));
        }
        let replies = Arc::new(FixtureTextModel::new(dir));
        self.onboarding_llm = Some(replies.clone());
        self.topology_vlm = Some(replies.clone());
        self.command_llm = Some(replies);
        Ok(self)
    }
}

pub async fn set_inventory(
    store: &SessionStore,
    session: &mut RoomSession,
    text: &str,
    mode: Mode,
    engines: &Engines,
) -> Result<DeviceInventory, PipelineError> {
    let inventory = match mode {
        Mode::Deterministic => extract_inventory_rulebased(text)?,
        Mode::Llm => {
            let model = engines
                .onboarding_llm
                .as_deref()
                .ok_or_else(|| PipelineError::ModeUnavailable("llm".into()))?;
            extract_inventory_llm(text, model).await?
        }
    };
    // A new declaration replaces the old one outright.
    session.meta.inventory = Some(inventory.clone());
    store.save(session)?;
    Ok(inventory)
}

/// Stores the image and runs detection on it.
pub async fn ingest_image(
    store: &SessionStore,
    session: &mut RoomSession,
    image: &[u8],
    engines: &Engines,
) -> Result<(), PipelineError> {
    if session.meta.inventory.is_none() {
        return Err(PipelineError::NotReady("declare the inventory before uploading an image".into()));
    }
    let (w, h) = image_dimensions(image)?;
    store.write_image(session, image, w, h)?;
    run_detection(store, session, engines).await
}

/// Detection and refinement over the stored image. Confirmed records keep
/// their uuids; everything else is replaced.
pub async fn run_detection(
    store: &SessionStore,
    session: &mut RoomSession,
    engines: &Engines,
) -> Result<(), PipelineError> {
    let inventory = session
        .meta
        .inventory
        .clone()
        .ok_or_else(|| PipelineError::NotReady("no inventory declared".into()))?;
    let detector = engines
        .detector
        .as_deref()
        .ok_or_else(|| PipelineError::NotReady("no detector configured".into()))?;
    engines.refinement.validate()?;
    let image = store.read_image(session)?;
    let prompts = build_detection_prompts(&inventory, session.meta.room_context.as_deref())?;
    let raw = detect(&image, &prompts, detector).await?;

    let mut ids = session.uuid_source();
    let records = refine_with_confirmed(&raw, &inventory, &engines.refinement, &session.records, &mut ids);
    session.commit_uuid_source(&ids);
    session.raw_detections = raw;
    session.records = records;
    rebuild_derived(store, session, &image, engines)
}

/// Re-renders `annotated.png`, recomputes the graph and drops the stale
/// topology report, then saves.
fn rebuild_derived(
    store: &SessionStore,
    session: &mut RoomSession,
    image: &[u8],
    engines: &Engines,
) -> Result<(), PipelineError> {
    let (w, h) = session
        .image_size()
        .ok_or_else(|| PipelineError::NotReady("no image uploaded".into()))?;
    let mut types: Vec<&str> = session.records.iter().map(|r| r.label.as_str()).collect();
    if let Some(inv) = &session.meta.inventory {
        types.extend(inv.types());
    }
    let colors = assign_colors(types);
    let rendered = render_annotations(image, &session.records, &session.landmarks, &colors, &RenderOptions::default())?;
    store.write_annotated(session.id(), &rendered.png)?;

    session.graph = if session.records.is_empty() {
        None
    } else {
        Some(compute_graph(&session.records, &session.landmarks, (w, h), &engines.topology)?)
    };
    session.topology = None;
    session.bindings.retain_records(&session.records);
    store.save(session)?;
    Ok(())
}

/// A record as sent by the annotation editor. Omit `uuid` to add a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEdit {
    #[serde(default)]
    pub uuid: Option<String>,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default = "manual_score")]
    pub score: f64,
    #[serde(default)]
    pub confirmed: bool,
    /// Ignored; names are always re-derived from positions.
    #[serde(default, skip_serializing)]
    pub name: Option<String>,
}

fn manual_score() -> f64 {
    1.0
}

/// Replacement record and landmark lists; `landmarks: null` keeps the current ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationUpdate {
    pub records: Vec<RecordEdit>,
    #[serde(default)]
    pub landmarks: Option<Vec<Landmark>>,
}

pub fn apply_annotations(
    store: &SessionStore,
    session: &mut RoomSession,
    update: AnnotationUpdate,
    engines: &Engines,
) -> Result<(), PipelineError> {
    let (w, h) = session
        .image_size()
        .ok_or_else(|| PipelineError::NotReady("no image uploaded".into()))?;
    let bad = |m: String| PipelineError::InvalidAnnotation(m);

    let mut ids = session.uuid_source();
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::with_capacity(update.records.len());
    for edit in update.records {
        let label = canonicalize_type(&edit.label)?;
        if !edit.bbox.within(w, h) {
            return Err(bad(format!("box {} outside the {w}x{h} image", edit.bbox)));
        }
        if !(0.0..=1.0).contains(&edit.score) {
            return Err(bad(format!("score {} outside [0, 1]", edit.score)));
        }
        let uuid = match edit.uuid {
            Some(u) => {
                if !session.records.iter().any(|r| r.uuid == u) {
                    return Err(bad(format!("unknown uuid {u:?}; omit uuid to add a record")));
                }
                u
            }
            None => ids.next_uuid(),
        };
        if !seen.insert(uuid.clone()) {
            return Err(bad(format!("uuid {uuid:?} appears twice")));
        }
        records.push(DeviceRecord {
            uuid,
            label,
            name: String::new(),
            bbox: edit.bbox,
            score: edit.score,
            confirmed: edit.confirmed,
        });
    }
    if let Some(landmarks) = update.landmarks {
        let mut names = std::collections::BTreeSet::new();
        for l in &landmarks {
            if l.name.trim().is_empty() {
                return Err(bad("landmark with empty name".into()));
            }
            if !l.bbox.within(w, h) {
                return Err(bad(format!("landmark box {} outside the {w}x{h} image", l.bbox)));
            }
            if !names.insert(l.name.clone()) {
                return Err(bad(format!("landmark {:?} appears twice", l.name)));
            }
        }
        session.landmarks = landmarks;
    }
    rename_records(&mut records, &engines.refinement);
    session.records = records;
    session.commit_uuid_source(&ids);
    let image = store.read_image(session)?;
    rebuild_derived(store, session, &image, engines)
}

/// Keys may be record uuids or record names (`light_02`).
pub fn set_bindings(
    store: &SessionStore,
    session: &mut RoomSession,
    raw: &BTreeMap<String, String>,
) -> Result<(), PipelineError> {
    let mut table = BindingTable::new();
    for (key, device_id) in raw {
        let record = session
            .records
            .iter()
            .find(|r| &r.uuid == key)
            .or_else(|| session.records.iter().find(|r| r.name.eq_ignore_ascii_case(key)))
            .ok_or_else(|| BindingError::UnknownUuid(key.clone()))?;
        table.bind(&record.uuid, device_id)?;
    }
    session.bindings = table;
    store.save(session)?;
    Ok(())
}

fn require_graph(session: &RoomSession) -> Result<&SpatialGraph, PipelineError> {
    session
        .graph
        .as_ref()
        .ok_or_else(|| PipelineError::NotReady("no annotated devices in this session".into()))
}

/// Deterministic mode writes a report synthesized from the graph; `llm`
/// sends the annotated image to the vision model.
pub async fn run_topology(
    store: &SessionStore,
    session: &mut RoomSession,
    mode: Mode,
    engines: &Engines,
) -> Result<TopologyReport, PipelineError> {
    let graph = require_graph(session)?;
    let text = match mode {
        Mode::Deterministic => synthesize_report(&session.records, &session.landmarks, graph),
        Mode::Llm => {
            let model = engines
                .topology_vlm
                .as_deref()
                .ok_or_else(|| PipelineError::ModeUnavailable("vlm".into()))?;
            let path = store.annotated_path(session.id())?;
            let png = std::fs::read(&path).map_err(|e| StoreError::Io(path.clone(), e.to_string()))?;
            let req = build_topology_prompt(&encode_base64(&png)?, &session.records, &session.landmarks)?;
            model.describe(&req.prompt, &req.image_b64).await?
        }
    };
    let report = parse_topology_report(&text, &session.records)?;
    session.topology = Some(report.clone());
    store.save(session)?;
    Ok(report)
}

/// Three-section report built from the graph alone.
pub fn synthesize_report(records: &[DeviceRecord], landmarks: &[Landmark], graph: &SpatialGraph) -> String {
    let name_of = |id: &str| -> String {
        records
            .iter()
            .find(|r| r.uuid == id)
            .map(|r| r.name.clone())
            .unwrap_or_else(|| id.to_string())
    };
    let mut sorted: Vec<&DeviceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    let mut out = format!("{}:\n", SECTION_HEADINGS[0]);
    for r in &sorted {
        out.push_str(&format!("- {}: {}.\n", r.name, describe_position(r, records, landmarks, graph)));
    }
    out.push_str(&format!("\n{}:\n", SECTION_HEADINGS[1]));
    for r in &sorted {
        let mut nearest: Vec<(f64, String)> = graph
            .edges_from(&r.uuid)
            .filter(|e| e.kind == RelationKind::NearestOfType)
            .map(|e| (e.metric, name_of(&e.object_id)))
            .collect();
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let list: Vec<String> = nearest.into_iter().map(|(_, n)| n).collect();
        if list.is_empty() {
            out.push_str(&format!("- {}: no other objects.\n", r.name));
        } else {
            out.push_str(&format!("- {}: closest are {}.\n", r.name, list.join(", ")));
        }
    }
    out.push_str(&format!("\n{}:\n", SECTION_HEADINGS[2]));
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            let (hz, vt) = classify_pair(&a.bbox, &b.bbox);
            let words = |k: RelationKind| match k {
                RelationKind::LeftOf => "left of",
                RelationKind::RightOf => "right of",
                RelationKind::Above => "above",
                RelationKind::Below => "below",
                RelationKind::XOverlap => "horizontally aligned with",
                RelationKind::YOverlap => "level with",
                _ => "near",
            };
            out.push_str(&format!("- {} is {} and {} {}.\n", a.name, words(hz), words(vt), b.name));
        }
    }
    out
}

/// Parses and resolves a command without executing it.
pub async fn resolve_command(
    session: &RoomSession,
    text: &str,
    mode: Mode,
    engines: &Engines,
) -> Result<Vec<ControlCommand>, PipelineError> {
    let graph = require_graph(session)?;
    match mode {
        Mode::Deterministic => {
            let ast = parse_spatial_command(text)?;
            Ok(resolve(&ast, &session.records, &session.landmarks, graph)?)
        }
        Mode::Llm => {
            let model = engines
                .command_llm
                .as_deref()
                .ok_or_else(|| PipelineError::ModeUnavailable("llm".into()))?;
            let prompt = build_command_prompt(text, &session.records, &session.landmarks, graph, session.topology.as_ref())?;
            let reply = model.complete(&prompt).await?;
            Ok(parse_llm_command_response(&reply, &session.records)?)
        }
    }
}
