//! Annotation file loader.
//!
//! The on-disk format is a JSON array of scene records:
//!
//! ```json
//! [{"image_id": "498334", "width": 800, "height": 600,
//!   "objects": [{"label": "man", "x": 10, "y": 20, "w": 50, "h": 120}],
//!   "relationships": [{"subject_index": 0, "object_index": 1, "predicate": "on"}]}]
//! ```
//!
//! Normalization rules: degenerate boxes (non-positive extent) and boxes
//! fully outside the image are dropped together with their relations;
//! partially out-of-bounds boxes are clamped to the image with at least one
//! pixel of extent. A relationship index beyond the record's object list is
//! an error, not a drop. Duplicate relationships are kept.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    BoundingBox, DatasetSplit, Entity, RelationInstance, Scene, Vocabulary, VocabularyKind,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationshipRecord {
    pub subject_index: usize,
    pub object_index: usize,
    pub predicate: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub objects: Vec<ObjectRecord>,
    #[serde(default)]
    pub relationships: Vec<RelationshipRecord>,
}

/// How to partition images into train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Explicit id lists. Every listed id must exist in the dataset.
    Explicit {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
    /// Seeded shuffle of the sorted id list, partitioned by fractions.
    Ratio { train: f64, val: f64, seed: u64 },
}

/// Ingestion output: normalized scenes plus bookkeeping about what the
/// normalization rules removed.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub scenes: Vec<Scene>,
    pub objects: Vocabulary,
    pub predicates: Vocabulary,
    pub split: DatasetSplit,
    pub dropped_entities: usize,
    pub dropped_relations: usize,
}

/// Decodes the annotation JSON, naming the offending record on failure.
pub fn parse_annotation_records(content: &str, path_label: &str) -> Result<Vec<SceneRecord>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(content).map_err(|e| Error::Parse {
            path: path_label.to_string(),
            context: format!("top-level structure must be a JSON array: {e}"),
        })?;
    let mut records = Vec::with_capacity(values.len());
    for (i, value) in values.into_iter().enumerate() {
        let hint = value
            .get("image_id")
            .and_then(|v| v.as_str().map(String::from).or_else(|| Some(v.to_string())))
            .unwrap_or_else(|| "unknown".into());
        let record: SceneRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path_label.to_string(),
            context: format!("record {i} (image_id {hint}): {e}"),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Clamps `[lo, lo+extent)` into `[0, limit)` keeping at least one unit.
fn clamp_interval(lo: f64, extent: f64, limit: f64) -> (f64, f64) {
    let a = lo.max(0.0).min(limit - 1.0);
    let b = (lo + extent).min(limit).max(a + 1.0);
    (a, b - a)
}

fn box_fully_outside(o: &ObjectRecord, width: f64, height: f64) -> bool {
    o.x >= width || o.y >= height || o.x + o.w <= 0.0 || o.y + o.h <= 0.0
}

/// Converts raw records into validated scenes and vocabularies.
///
/// With explicit vocabularies, labels outside them are an error; otherwise
/// vocabularies are built from the labels that survive normalization, sorted
/// so ids do not depend on annotation order.
pub fn ingest(
    records: &[SceneRecord],
    split_spec: &SplitSpec,
    object_vocab: Option<Vocabulary>,
    predicate_vocab: Option<Vocabulary>,
) -> Result<IngestReport> {
    let mut seen_ids = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(prev) = seen_ids.insert(r.image_id.clone(), i) {
            return Err(Error::Ingestion(format!(
                "image_id {:?} appears in records {prev} and {i}",
                r.image_id
            )));
        }
        if !(r.width >= 1.0 && r.height >= 1.0)
            || !r.width.is_finite()
            || !r.height.is_finite()
        {
            return Err(Error::Ingestion(format!(
                "image {:?}: invalid extent {}x{}",
                r.image_id, r.width, r.height
            )));
        }
        for (j, o) in r.objects.iter().enumerate() {
            if ![o.x, o.y, o.w, o.h].iter().all(|v| v.is_finite()) {
                return Err(Error::Ingestion(format!(
                    "image {:?}: object {j} has non-finite coordinates",
                    r.image_id
                )));
            }
        }
        for (j, rel) in r.relationships.iter().enumerate() {
            if rel.subject_index >= r.objects.len() || rel.object_index >= r.objects.len() {
                return Err(Error::Ingestion(format!(
                    "image {:?}: relationship {j} references object index {} but the record has {} objects",
                    r.image_id,
                    rel.subject_index.max(rel.object_index),
                    r.objects.len()
                )));
            }
        }
    }

    // First pass: decide which entities survive, to know which labels the
    // observed vocabularies must contain.
    let mut kept: Vec<Vec<Option<&ObjectRecord>>> = Vec::with_capacity(records.len());
    let mut dropped_entities = 0usize;
    for r in records {
        let mut scene_kept = Vec::with_capacity(r.objects.len());
        for o in &r.objects {
            if o.w <= 0.0 || o.h <= 0.0 || box_fully_outside(o, r.width, r.height) {
                dropped_entities += 1;
                scene_kept.push(None);
            } else {
                scene_kept.push(Some(o));
            }
        }
        kept.push(scene_kept);
    }

    let objects = match object_vocab {
        Some(v) => {
            if v.kind() != VocabularyKind::Object {
                return Err(Error::Ingestion("object vocabulary has wrong kind".into()));
            }
            let unknown: BTreeSet<&str> = kept
                .iter()
                .flatten()
                .flatten()
                .map(|o| o.label.as_str())
                .filter(|l| v.id(l).is_none())
                .collect();
            if !unknown.is_empty() {
                return Err(Error::Ingestion(format!(
                    "labels missing from the object vocabulary: {unknown:?}"
                )));
            }
            v
        }
        None => Vocabulary::from_observed(
            VocabularyKind::Object,
            kept.iter()
                .flatten()
                .flatten()
                .map(|o| o.label.clone()),
        ),
    };

    let predicates = match predicate_vocab {
        Some(v) => {
            if v.kind() != VocabularyKind::Predicate {
                return Err(Error::Ingestion(
                    "predicate vocabulary has wrong kind".into(),
                ));
            }
            let unknown: BTreeSet<&str> = records
                .iter()
                .flat_map(|r| r.relationships.iter())
                .map(|rel| rel.predicate.as_str())
                .filter(|p| v.id(p).is_none())
                .collect();
            if !unknown.is_empty() {
                return Err(Error::Ingestion(format!(
                    "predicates missing from the vocabulary: {unknown:?}"
                )));
            }
            v
        }
        None => Vocabulary::from_observed(
            VocabularyKind::Predicate,
            records
                .iter()
                .flat_map(|r| r.relationships.iter())
                .map(|rel| rel.predicate.clone()),
        ),
    };

    let mut scenes = Vec::with_capacity(records.len());
    let mut dropped_relations = 0usize;
    for (r, scene_kept) in records.iter().zip(&kept) {
        let mut index_map: Vec<Option<usize>> = Vec::with_capacity(r.objects.len());
        let mut entities = Vec::new();
        for o in scene_kept {
            match o {
                Some(o) => {
                    let (x, w) = clamp_interval(o.x, o.w, r.width);
                    let (y, h) = clamp_interval(o.y, o.h, r.height);
                    index_map.push(Some(entities.len()));
                    entities.push(Entity {
                        label_id: objects
                            .id(&o.label)
                            .expect("kept labels are always in the vocabulary"),
                        bbox: BoundingBox::new(x, y, w, h)?,
                    });
                }
                None => index_map.push(None),
            }
        }
        let mut relations = Vec::new();
        for rel in &r.relationships {
            let (Some(si), Some(oi)) = (index_map[rel.subject_index], index_map[rel.object_index])
            else {
                dropped_relations += 1;
                continue;
            };
            if si == oi {
                dropped_relations += 1;
                continue;
            }
            relations.push(RelationInstance {
                subject_idx: si,
                object_idx: oi,
                predicate_id: predicates
                    .id(&rel.predicate)
                    .expect("checked against the vocabulary above"),
            });
        }
        let scene = Scene {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            entities,
            relations,
        };
        scene.validate()?;
        scenes.push(scene);
    }

    let split = build_split(&scenes, split_spec)?;
    Ok(IngestReport {
        scenes,
        objects,
        predicates,
        split,
        dropped_entities,
        dropped_relations,
    })
}

fn build_split(scenes: &[Scene], spec: &SplitSpec) -> Result<DatasetSplit> {
    let ids: BTreeSet<&str> = scenes.iter().map(|s| s.image_id.as_str()).collect();
    let split = match spec {
        SplitSpec::Explicit { train, val, test } => {
            for id in train.iter().chain(val).chain(test) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Ingestion(format!(
                        "split references image {id:?} which is not in the dataset"
                    )));
                }
            }
            DatasetSplit {
                train: train.clone(),
                val: val.clone(),
                test: test.clone(),
            }
        }
        SplitSpec::Ratio { train, val, seed } => {
            if !(*train >= 0.0 && *val >= 0.0 && train + val <= 1.0) {
                return Err(Error::Ingestion(format!(
                    "invalid split fractions train={train} val={val}"
                )));
            }
            let mut sorted: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(*seed);
            sorted.shuffle(&mut rng);
            let n = sorted.len();
            let n_train = (train * n as f64).round() as usize;
            let n_val = ((val * n as f64).round() as usize).min(n - n_train);
            DatasetSplit {
                train: sorted[..n_train].to_vec(),
                val: sorted[n_train..n_train + n_val].to_vec(),
                test: sorted[n_train + n_val..].to_vec(),
            }
        }
    };
    split.validate()?;
    Ok(split)
}

/// Reads and ingests an annotation file.
pub fn load_annotations(
    path: &Path,
    split_spec: &SplitSpec,
    object_vocab: Option<Vocabulary>,
    predicate_vocab: Option<Vocabulary>,
) -> Result<IngestReport> {
    let content = std::fs::read_to_string(path)?;
    let records = parse_annotation_records(&content, &path.display().to_string())?;
    ingest(&records, split_spec, object_vocab, predicate_vocab)
}

/// Renders scenes back into annotation records, for writing datasets the
/// loader can read.
pub fn scenes_to_records(
    scenes: &[Scene],
    objects: &Vocabulary,
    predicates: &Vocabulary,
) -> Result<Vec<SceneRecord>> {
    scenes
        .iter()
        .map(|s| {
            Ok(SceneRecord {
                image_id: s.image_id.clone(),
                width: s.width,
                height: s.height,
                objects: s
                    .entities
                    .iter()
                    .map(|e| {
                        Ok(ObjectRecord {
                            label: objects
                                .name(e.label_id)
                                .ok_or_else(|| {
                                    Error::Ingestion(format!(
                                        "scene {}: label id {} outside vocabulary",
                                        s.image_id, e.label_id
                                    ))
                                })?
                                .to_string(),
                            x: e.bbox.x,
                            y: e.bbox.y,
                            w: e.bbox.w,
                            h: e.bbox.h,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                relationships: s
                    .relations
                    .iter()
                    .map(|r| {
                        Ok(RelationshipRecord {
                            subject_index: r.subject_idx,
                            object_index: r.object_idx,
                            predicate: predicates
                                .name(r.predicate_id)
                                .ok_or_else(|| {
                                    Error::Ingestion(format!(
                                        "scene {}: predicate id {} outside vocabulary",
                                        s.image_id, r.predicate_id
                                    ))
                                })?
                                .to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            })
        })
        .collect()
}
