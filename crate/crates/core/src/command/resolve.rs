use serde::{Deserialize, Serialize};

use crate::model::{canonicalize_type, BBox, DeviceRecord, Landmark};
use crate::topology::{RelationKind, SpatialGraph};

use super::{Cardinality, CommandAst, CommandError, ControlCommand, ProximityRelation, Qualifier, Side};

/// A record that survived filtering but could not be singled out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub uuid: String,
    pub name: String,
}

impl From<&DeviceRecord> for Candidate {
    fn from(r: &DeviceRecord) -> Self {
        Candidate {
            uuid: r.uuid.clone(),
            name: r.name.clone(),
        }
    }
}

struct Anchor<'a> {
    id: &'a str,
    bbox: &'a BBox,
}

/// Landmark name first, then a device name, then every device of a type.
fn anchors<'a>(anchor: &str, records: &'a [DeviceRecord], landmarks: &'a [Landmark]) -> Vec<Anchor<'a>> {
    let marks: Vec<Anchor> = landmarks
        .iter()
        .filter(|l| canonicalize_type(&l.name).map(|n| n == anchor).unwrap_or(false))
        .map(|l| Anchor { id: &l.name, bbox: &l.bbox })
        .collect();
    if !marks.is_empty() {
        return marks;
    }
    let named: Vec<Anchor> = records
        .iter()
        .filter(|r| r.name.eq_ignore_ascii_case(anchor))
        .map(|r| Anchor { id: &r.uuid, bbox: &r.bbox })
        .collect();
    if !named.is_empty() {
        return named;
    }
    records
        .iter()
        .filter(|r| r.label == anchor)
        .map(|r| Anchor { id: &r.uuid, bbox: &r.bbox })
        .collect()
}

fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx) * (ax - bx) + (ay - by) * (ay - by)).sqrt()
}

fn relation_kind(r: ProximityRelation) -> RelationKind {
    match r {
        ProximityRelation::Near => RelationKind::Near,
        ProximityRelation::LeftOf => RelationKind::LeftOf,
        ProximityRelation::RightOf => RelationKind::RightOf,
        ProximityRelation::Above => RelationKind::Above,
        ProximityRelation::Below => RelationKind::Below,
    }
}

/// Resolves a parsed command to concrete device commands.
///
/// Proximity and region qualifiers filter first, in the order written; then
/// the superlative picks the extreme record(s); then cardinality ranks the
/// survivors by distance to the anchors, score and name.
pub fn resolve(
    ast: &CommandAst,
    records: &[DeviceRecord],
    landmarks: &[Landmark],
    graph: &SpatialGraph,
) -> Result<Vec<ControlCommand>, CommandError> {
    if records.is_empty() {
        return Err(CommandError::NoDevices);
    }
    let mut survivors: Vec<&DeviceRecord> = records.iter().filter(|r| r.label == ast.device_type).collect();
    if survivors.is_empty() {
        return Err(CommandError::NoSuchType(ast.device_type.clone()));
    }

    // Normalized distance to the closest anchor, across proximity qualifiers.
    let mut proximity: Vec<Vec<Anchor>> = Vec::new();
    let diag = graph.image_diag.max(f64::MIN_POSITIVE);

    for q in &ast.qualifiers {
        match q {
            Qualifier::Proximity { relation, anchor } => {
                let found = anchors(anchor, records, landmarks);
                if found.is_empty() {
                    return Err(CommandError::NoMatch(format!("nothing called {anchor:?}")));
                }
                let kind = relation_kind(*relation);
                let kept: Vec<&DeviceRecord> = survivors
                    .iter()
                    .copied()
                    .filter(|r| found.iter().any(|a| a.id != r.uuid && graph.has_edge(&r.uuid, kind, a.id)))
                    .collect();
                survivors = if kept.is_empty() && *relation == ProximityRelation::Near {
                    let nearest = survivors
                        .iter()
                        .copied()
                        .filter_map(|r| {
                            found
                                .iter()
                                .filter(|a| a.id != r.uuid)
                                .map(|a| center_distance(&r.bbox, a.bbox))
                                .min_by(f64::total_cmp)
                                .map(|d| (d, r))
                        })
                        .min_by(|(da, ra), (db, rb)| da.total_cmp(db).then_with(|| ra.name.cmp(&rb.name)));
                    nearest.map(|(_, r)| vec![r]).unwrap_or_default()
                } else {
                    kept
                };
                if survivors.is_empty() {
                    return Err(CommandError::NoMatch(format!(
                        "no {} {} the {anchor}",
                        ast.device_type,
                        relation_phrase(*relation)
                    )));
                }
                proximity.push(found);
            }
            Qualifier::Region(side) => {
                let mid = f64::from(graph.image_size[0]) / 2.0;
                survivors.retain(|r| {
                    let cx = r.bbox.center().0;
                    match side {
                        Side::Left => cx < mid,
                        Side::Right => cx >= mid,
                    }
                });
                if survivors.is_empty() {
                    let word = match side {
                        Side::Left => "left",
                        Side::Right => "right",
                    };
                    return Err(CommandError::NoMatch(format!("no {} on the {word}", ast.device_type)));
                }
            }
            Qualifier::Superlative(_) | Qualifier::Cardinality(_) => {}
        }
    }

    let cardinality = ast.cardinality();
    let chosen: Vec<&DeviceRecord> = if let Some(axis) = ast.superlative() {
        survivors.sort_by(|a, b| axis.compare(a, b));
        let n = match cardinality {
            None => 1,
            Some(Cardinality::Count(n)) => n as usize,
            Some(Cardinality::All) => survivors.len(),
        };
        survivors.into_iter().take(n).collect()
    } else {
        match cardinality {
            None if survivors.len() > 1 => {
                let mut c: Vec<Candidate> = survivors.iter().map(|r| Candidate::from(*r)).collect();
                c.sort_by(|a, b| a.name.cmp(&b.name));
                return Err(CommandError::AmbiguousTarget(c));
            }
            None => survivors,
            Some(Cardinality::All) => {
                survivors.sort_by(|a, b| a.name.cmp(&b.name));
                survivors
            }
            Some(Cardinality::Count(n)) => {
                let metric = |r: &DeviceRecord| -> f64 {
                    proximity
                        .iter()
                        .map(|found| {
                            found
                                .iter()
                                .filter(|a| a.id != r.uuid)
                                .map(|a| center_distance(&r.bbox, a.bbox) / diag)
                                .fold(f64::INFINITY, f64::min)
                        })
                        .sum()
                };
                let mut ranked: Vec<(f64, &DeviceRecord)> = survivors.into_iter().map(|r| (metric(r), r)).collect();
                ranked.sort_by(|(ma, a), (mb, b)| {
                    ma.total_cmp(mb)
                        .then_with(|| b.score.total_cmp(&a.score))
                        .then_with(|| a.name.cmp(&b.name))
                });
                ranked.into_iter().take(n as usize).map(|(_, r)| r).collect()
            }
        }
    };

    Ok(chosen
        .into_iter()
        .map(|r| ControlCommand {
            uuid: r.uuid.clone(),
            action: ast.action,
        })
        .collect())
}

fn relation_phrase(r: ProximityRelation) -> &'static str {
    match r {
        ProximityRelation::Near => "near",
        ProximityRelation::LeftOf => "left of",
        ProximityRelation::RightOf => "right of",
        ProximityRelation::Above => "above",
        ProximityRelation::Below => "below",
    }
}
