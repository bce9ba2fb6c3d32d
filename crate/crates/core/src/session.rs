//! On-disk session store: one directory per session, canonical JSON files,
//! every write atomic (temp file in the same directory, then rename).
//!
//! ```text
//! <root>/<session-id>/
//!   session.json  raw_detections.json  records.json  landmarks.json
//!   graph.json  bindings.json  topology.json  image.<ext>  annotated.png
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::actuation::BindingTable;
use crate::model::{DeviceInventory, DeviceRecord, Detection, Landmark};
use crate::refinement::SequencedUuids;
use crate::topology::{SpatialGraph, TopologyReport};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {0} already exists")]
    Exists(String),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, String),
    #[error("corrupt file {0}: {1}")]
    Corrupt(PathBuf, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    #[serde(default)]
    pub inventory: Option<DeviceInventory>,
    #[serde(default)]
    pub image: Option<ImageMeta>,
    /// Next sequence number for record uuids.
    #[serde(default)]
    pub uuid_counter: u64,
    #[serde(default)]
    pub room_context: Option<String>,
}

/// Full in-memory state of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSession {
    pub meta: SessionMeta,
    pub raw_detections: Vec<Detection>,
    pub records: Vec<DeviceRecord>,
    pub landmarks: Vec<Landmark>,
    pub graph: Option<SpatialGraph>,
    pub bindings: BindingTable,
    pub topology: Option<TopologyReport>,
}

impl RoomSession {
    pub fn new(id: &str) -> Self {
        RoomSession {
            meta: SessionMeta {
                id: id.to_string(),
                inventory: None,
                image: None,
                uuid_counter: 0,
                room_context: None,
            },
            raw_detections: Vec::new(),
            records: Vec::new(),
            landmarks: Vec::new(),
            graph: None,
            bindings: BindingTable::new(),
            topology: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    /// Uuid source continuing this session's sequence.
    pub fn uuid_source(&self) -> SequencedUuids {
        SequencedUuids {
            namespace: Uuid::parse_str(&self.meta.id).unwrap_or(Uuid::NAMESPACE_OID),
            next: self.meta.uuid_counter,
        }
    }

    pub fn commit_uuid_source(&mut self, ids: &SequencedUuids) {
        self.meta.uuid_counter = ids.next;
    }

    pub fn image_size(&self) -> Option<(u32, u32)> {
        self.meta.image.as_ref().map(|m| (m.width, m.height))
    }
}

pub const SESSION_FILE: &str = "session.json";
pub const RAW_DETECTIONS_FILE: &str = "raw_detections.json";
pub const RECORDS_FILE: &str = "records.json";
pub const LANDMARKS_FILE: &str = "landmarks.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const BINDINGS_FILE: &str = "bindings.json";
pub const TOPOLOGY_FILE: &str = "topology.json";
pub const ANNOTATED_FILE: &str = "annotated.png";

/// The JSON files making up a session's state, in write order.
pub const JSON_FILES: [&str; 7] = [
    RAW_DETECTIONS_FILE,
    RECORDS_FILE,
    LANDMARKS_FILE,
    GRAPH_FILE,
    BINDINGS_FILE,
    TOPOLOGY_FILE,
    SESSION_FILE,
];

/// Pretty JSON with a trailing newline; field order comes from the types.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("session types serialize");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| StoreError::Io(root.clone(), e.to_string()))?;
        Ok(SessionStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Session ids are uuids, which also keeps them safe as path components.
    pub fn session_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        let parsed = Uuid::parse_str(id).map_err(|_| StoreError::InvalidId(id.to_string()))?;
        if parsed.hyphenated().to_string() != id {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        Ok(self.root.join(id))
    }

    pub fn create(&self) -> Result<RoomSession, StoreError> {
        self.create_with_id(&Uuid::new_v4().to_string())
    }

    pub fn create_with_id(&self, id: &str) -> Result<RoomSession, StoreError> {
        let dir = self.session_dir(id)?;
        if dir.join(SESSION_FILE).exists() {
            return Err(StoreError::Exists(id.to_string()));
        }
        std::fs::create_dir_all(&dir).map_err(|e| StoreError::Io(dir.clone(), e.to_string()))?;
        let session = RoomSession::new(id);
        self.save(&session)?;
        Ok(session)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.session_dir(id)
            .map(|d| d.join(SESSION_FILE).is_file())
            .unwrap_or(false)
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let entries = std::fs::read_dir(&self.root).map_err(|e| StoreError::Io(self.root.clone(), e.to_string()))?;
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|name| self.exists(name))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn load(&self, id: &str) -> Result<RoomSession, StoreError> {
        let dir = self.session_dir(id)?;
        if !dir.join(SESSION_FILE).is_file() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let meta: SessionMeta = read_json(&dir.join(SESSION_FILE))?.ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        if meta.id != id {
            return Err(StoreError::Corrupt(dir.join(SESSION_FILE), "id mismatch".into()));
        }
        Ok(RoomSession {
            meta,
            raw_detections: read_json(&dir.join(RAW_DETECTIONS_FILE))?.unwrap_or_default(),
            records: read_json(&dir.join(RECORDS_FILE))?.unwrap_or_default(),
            landmarks: read_json(&dir.join(LANDMARKS_FILE))?.unwrap_or_default(),
            graph: read_json(&dir.join(GRAPH_FILE))?,
            bindings: read_json(&dir.join(BINDINGS_FILE))?.unwrap_or_default(),
            topology: read_json(&dir.join(TOPOLOGY_FILE))?,
        })
    }

    /// Writes every JSON file; `session.json` goes last.
    pub fn save(&self, session: &RoomSession) -> Result<(), StoreError> {
        let dir = self.session_dir(session.id())?;
        std::fs::create_dir_all(&dir).map_err(|e| StoreError::Io(dir.clone(), e.to_string()))?;
        write_atomic(&dir.join(RAW_DETECTIONS_FILE), &canonical_json(&session.raw_detections))?;
        write_atomic(&dir.join(RECORDS_FILE), &canonical_json(&session.records))?;
        write_atomic(&dir.join(LANDMARKS_FILE), &canonical_json(&session.landmarks))?;
        write_optional(&dir.join(GRAPH_FILE), session.graph.as_ref())?;
        write_atomic(&dir.join(BINDINGS_FILE), &canonical_json(&session.bindings))?;
        write_optional(&dir.join(TOPOLOGY_FILE), session.topology.as_ref())?;
        write_atomic(&dir.join(SESSION_FILE), &canonical_json(&session.meta))
    }

    pub fn write_image(&self, session: &mut RoomSession, bytes: &[u8], width: u32, height: u32) -> Result<(), StoreError> {
        let dir = self.session_dir(session.id())?;
        let ext = match image::guess_format(bytes) {
            Ok(image::ImageFormat::Jpeg) => "jpg",
            _ => "png",
        };
        let file_name = format!("image.{ext}");
        if let Some(old) = &session.meta.image {
            if old.file_name != file_name {
                let _ = std::fs::remove_file(dir.join(&old.file_name));
            }
        }
        write_atomic(&dir.join(&file_name), bytes)?;
        session.meta.image = Some(ImageMeta {
            file_name,
            width,
            height,
        });
        Ok(())
    }

    pub fn read_image(&self, session: &RoomSession) -> Result<Vec<u8>, StoreError> {
        let meta = session
            .meta
            .image
            .as_ref()
            .ok_or_else(|| StoreError::NotFound(format!("{}/image", session.id())))?;
        let path = self.session_dir(session.id())?.join(&meta.file_name);
        std::fs::read(&path).map_err(|e| StoreError::Io(path, e.to_string()))
    }

    pub fn write_annotated(&self, id: &str, png: &[u8]) -> Result<(), StoreError> {
        write_atomic(&self.annotated_path(id)?, png)
    }

    pub fn annotated_path(&self, id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.session_dir(id)?.join(ANNOTATED_FILE))
    }

    /// Raw bytes of each JSON file (absent files are skipped), for comparisons.
    pub fn snapshot(&self, id: &str) -> Result<Vec<(String, Vec<u8>)>, StoreError> {
        let dir = self.session_dir(id)?;
        let mut out = Vec::new();
        for name in JSON_FILES {
            let path = dir.join(name);
            if path.is_file() {
                let bytes = std::fs::read(&path).map_err(|e| StoreError::Io(path.clone(), e.to_string()))?;
                out.push((name.to_string(), bytes));
            }
        }
        Ok(out)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, StoreError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::Corrupt(path.to_path_buf(), e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StoreError::Io(path.to_path_buf(), e.to_string())),
    }
}

fn write_optional<T: Serialize>(path: &Path, value: Option<&T>) -> Result<(), StoreError> {
    match value {
        Some(v) => write_atomic(path, &canonical_json(v)),
        None => match std::fs::remove_file(path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(StoreError::Io(path.to_path_buf(), e.to_string())),
        },
    }
}

/// Temp file in the target directory, fsync, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io = |e: std::io::Error| StoreError::Io(path.to_path_buf(), e.to_string());
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
