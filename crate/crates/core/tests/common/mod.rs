#![allow(dead_code)]

use std::path::PathBuf;

use inot::model::{DeviceRecord, Landmark};
use inot::pipeline::{self, Engines, Mode};
use inot::session::{RoomSession, SessionStore};
use inot::topology::{compute_graph, SpatialGraph, TopologyConfig};
use serde::Deserialize;

pub const ROOM_INVENTORY: &str = "There are 3 lights and 2 fans in this room.";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn room_dir() -> PathBuf {
    fixtures().join("room")
}

pub fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub records: Vec<DeviceRecord>,
    pub landmarks: Vec<Landmark>,
}

impl Scene {
    pub fn load() -> Scene {
        serde_json::from_str(&read(room_dir().join("scene.json"))).expect("scene.json")
    }

    pub fn graph(&self) -> SpatialGraph {
        compute_graph(&self.records, &self.landmarks, (self.width, self.height), &TopologyConfig::default())
            .expect("fixture graph")
    }

    pub fn uuid_of(&self, name: &str) -> String {
        self.records
            .iter()
            .find(|r| r.name == name)
            .unwrap_or_else(|| panic!("no record {name}"))
            .uuid
            .clone()
    }
}

pub fn room_engines() -> Engines {
    Engines::default().with_fixtures(&room_dir()).expect("fixture engines")
}

pub fn room_landmarks() -> Vec<Landmark> {
    serde_json::from_str(&read(room_dir().join("landmarks.json"))).expect("landmarks.json")
}

pub fn room_png() -> Vec<u8> {
    std::fs::read(room_dir().join("room.png")).expect("room.png")
}

/// Inventory, landmarks and image for the fixture room, with detection run.
pub async fn onboard_room(store: &SessionStore, engines: &Engines) -> RoomSession {
    let mut s = store.create().expect("create session");
    s.landmarks = room_landmarks();
    pipeline::set_inventory(store, &mut s, ROOM_INVENTORY, Mode::Deterministic, engines)
        .await
        .expect("inventory");
    pipeline::ingest_image(store, &mut s, &room_png(), engines)
        .await
        .expect("image");
    s
}
