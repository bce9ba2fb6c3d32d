//! Quality control for raw detections: inventory filtering, confidence
//! ranking, spatial naming and identifier assignment.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::model::{format_device_name, BBox, Detection, DeviceInventory, DeviceRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefinementError {
    #[error("confidence threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("alignment epsilon {0} must be non-negative")]
    InvalidEpsilon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub confidence_threshold: f64,
    /// Center-x distance, in pixels, under which devices count as vertically aligned.
    pub alignment_epsilon: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            alignment_epsilon: 5.0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefinementError> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(RefinementError::InvalidThreshold(self.confidence_threshold));
        }
        if !(self.alignment_epsilon >= 0.0 && self.alignment_epsilon.is_finite()) {
            return Err(RefinementError::InvalidEpsilon(self.alignment_epsilon));
        }
        Ok(())
    }
}

/// Source of fresh record identifiers.
pub trait UuidSource {
    fn next_uuid(&mut self) -> String;
}

/// Random v4 identifiers.
#[derive(Debug, Default)]
pub struct RandomUuids;

impl UuidSource for RandomUuids {
    fn next_uuid(&mut self) -> String {
        Uuid::new_v4().to_string()
    }
}

/// Deterministic identifiers: v5 UUIDs derived from a namespace and a
/// monotonically increasing sequence number. Persisting `next` is enough to
/// resume the sequence after a restart.
#[derive(Debug, Clone)]
pub struct SequencedUuids {
    pub namespace: Uuid,
    pub next: u64,
}

impl UuidSource for SequencedUuids {
    fn next_uuid(&mut self) -> String {
        let id = Uuid::new_v5(&self.namespace, &self.next.to_be_bytes());
        self.next += 1;
        id.to_string()
    }
}

pub fn filter_by_inventory(detections: &[Detection], inventory: &DeviceInventory) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| inventory.contains(&d.label))
        .cloned()
        .collect()
}

fn cmp_boxes(a: &BBox, b: &BBox) -> Ordering {
    a.x1()
        .total_cmp(&b.x1())
        .then(a.y1().total_cmp(&b.y1()))
        .then(a.x2().total_cmp(&b.x2()))
        .then(a.y2().total_cmp(&b.y2()))
}

/// Per type: drop scores under the threshold, rank by score (ties broken by
/// x1 then y1) and keep at most the inventory count. Output is grouped by type
/// in sorted order, ranked within each type.
pub fn rank_and_select(
    detections: &[Detection],
    inventory: &DeviceInventory,
    config: &RefinementConfig,
) -> Vec<Detection> {
    let mut by_type: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in detections.iter().filter(|d| d.score >= config.confidence_threshold) {
        by_type.entry(d.label.as_str()).or_default().push(d);
    }
    let mut out = Vec::new();
    for (kind, mut group) in by_type {
        group.sort_by(|a, b| b.score.total_cmp(&a.score).then(cmp_boxes(&a.bbox, &b.bbox)));
        let quota = inventory.get(kind) as usize;
        out.extend(group.into_iter().take(quota).cloned());
    }
    out
}

/// Left-to-right naming order for boxes of one type. Boxes whose center-x
/// values chain together within `epsilon` form an aligned column that is
/// ordered top to bottom instead. Returns indices into `boxes` in name order.
pub fn naming_order(boxes: &[(BBox, f64)], epsilon: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    let key = |i: usize| {
        let (b, _) = &boxes[i];
        let (cx, cy) = b.center();
        (cx, cy, b)
    };
    idx.sort_by(|&i, &j| {
        let (cxi, cyi, bi) = key(i);
        let (cxj, cyj, bj) = key(j);
        cxi.total_cmp(&cxj)
            .then(cyi.total_cmp(&cyj))
            .then(cmp_boxes(bi, bj))
            .then(boxes[j].1.total_cmp(&boxes[i].1))
    });

    let mut ordered = Vec::with_capacity(idx.len());
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && key(idx[end]).0 - key(idx[end - 1]).0 <= epsilon {
            end += 1;
        }
        let mut column = idx[start..end].to_vec();
        column.sort_by(|&i, &j| {
            let (cxi, cyi, bi) = key(i);
            let (cxj, cyj, bj) = key(j);
            cyi.total_cmp(&cyj)
                .then(cxi.total_cmp(&cxj))
                .then(cmp_boxes(bi, bj))
                .then(boxes[j].1.total_cmp(&boxes[i].1))
        });
        ordered.extend(column);
        start = end;
    }
    ordered
}

/// Names the final selection `{type}_{NN}`. Output is grouped by type in
/// sorted order, then by index.
pub fn assign_names(detections: &[Detection], config: &RefinementConfig) -> Vec<(Detection, String)> {
    let mut by_type: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        by_type.entry(d.label.as_str()).or_default().push(d);
    }
    let mut out = Vec::with_capacity(detections.len());
    for (kind, group) in by_type {
        let boxes: Vec<(BBox, f64)> = group.iter().map(|d| (d.bbox, d.score)).collect();
        for (n, i) in naming_order(&boxes, config.alignment_epsilon).into_iter().enumerate() {
            out.push((group[i].clone(), format_device_name(kind, n + 1)));
        }
    }
    out
}

pub fn assign_uuids(named: Vec<(Detection, String)>, ids: &mut dyn UuidSource) -> Vec<DeviceRecord> {
    named
        .into_iter()
        .map(|(d, name)| DeviceRecord {
            uuid: ids.next_uuid(),
            label: d.label,
            name,
            bbox: d.bbox,
            score: d.score,
            confirmed: false,
        })
        .collect()
}

/// filter -> rank/select -> name -> uuid.
pub fn refine(
    detections: &[Detection],
    inventory: &DeviceInventory,
    config: &RefinementConfig,
    ids: &mut dyn UuidSource,
) -> Vec<DeviceRecord> {
    let relevant = filter_by_inventory(detections, inventory);
    let selected = rank_and_select(&relevant, inventory, config);
    assign_uuids(assign_names(&selected, config), ids)
}

/// Re-derives every record name from the current boxes, keeping uuids.
/// Records come back grouped by type and ordered by name.
pub fn rename_records(records: &mut Vec<DeviceRecord>, config: &RefinementConfig) {
    let mut by_type: BTreeMap<String, Vec<DeviceRecord>> = BTreeMap::new();
    for r in records.drain(..) {
        by_type.entry(r.label.clone()).or_default().push(r);
    }
    for (kind, group) in by_type {
        let boxes: Vec<(BBox, f64)> = group.iter().map(|r| (r.bbox, r.score)).collect();
        let order = naming_order(&boxes, config.alignment_epsilon);
        let mut slots: Vec<Option<DeviceRecord>> = group.into_iter().map(Some).collect();
        for (n, i) in order.into_iter().enumerate() {
            let mut r = slots[i].take().expect("each index used once");
            r.name = format_device_name(&kind, n + 1);
            records.push(r);
        }
    }
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = ix * iy;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Overlap above which a fresh detection is taken to be an already confirmed device.
pub const CONFIRMED_OVERLAP_IOU: f64 = 0.5;

/// Refinement for a detection refresh: confirmed records survive with their
/// uuids and consume inventory slots; fresh detections fill what is left and
/// get fresh uuids. Everything is renamed together.
pub fn refine_with_confirmed(
    detections: &[Detection],
    inventory: &DeviceInventory,
    config: &RefinementConfig,
    previous: &[DeviceRecord],
    ids: &mut dyn UuidSource,
) -> Vec<DeviceRecord> {
    let confirmed: Vec<DeviceRecord> = previous
        .iter()
        .filter(|r| r.confirmed && inventory.contains(&r.label))
        .cloned()
        .collect();

    let mut remaining = DeviceInventory::new();
    for (kind, count) in inventory.iter() {
        let taken = confirmed.iter().filter(|r| r.label == kind).count() as u32;
        if count > taken {
            remaining
                .add(kind, i64::from(count - taken))
                .expect("positive remainder");
        }
    }

    let fresh: Vec<Detection> = filter_by_inventory(detections, &remaining)
        .into_iter()
        .filter(|d| {
            !confirmed
                .iter()
                .any(|r| r.label == d.label && iou(&r.bbox, &d.bbox) >= CONFIRMED_OVERLAP_IOU)
        })
        .collect();
    let selected = rank_and_select(&fresh, &remaining, config);

    let mut records = confirmed;
    records.extend(assign_uuids(
        selected.into_iter().map(|d| (d, String::new())).collect(),
        ids,
    ));
    rename_records(&mut records, config);
    records
}
