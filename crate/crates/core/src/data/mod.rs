//! Dataset model: scenes, entities, relation instances, vocabularies and
//! split bookkeeping, plus loaders for annotation files and a synthetic
//! generator used by the test and ablation fixtures.

pub mod synthetic;
pub mod vg;

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box coordinates must be finite, got {self:?}"
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "box extent must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Stable textual form used in embedding cache keys.
    pub fn cache_key(&self) -> String {
        format!("{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

/// An annotated object instance inside a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    /// Index into the object vocabulary.
    pub label_id: usize,
    pub bbox: BoundingBox,
}

/// A directed labelled edge between two entities of the same scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub subject_idx: usize,
    pub object_idx: usize,
    /// Index into the predicate vocabulary.
    pub predicate_id: usize,
}

/// One image plus its annotations. Entity indices in `relations` refer to
/// positions in `entities`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationInstance>,
}

impl Scene {
    /// Checks that every relation references valid, distinct entities.
    pub fn validate(&self) -> Result<()> {
        if !(self.width >= 1.0 && self.height >= 1.0) {
            return Err(Error::Ingestion(format!(
                "scene {}: image extent must be at least 1x1",
                self.image_id
            )));
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.subject_idx >= self.entities.len() || r.object_idx >= self.entities.len() {
                return Err(Error::Ingestion(format!(
                    "scene {}: relation {} references entity out of range",
                    self.image_id, i
                )));
            }
            if r.subject_idx == r.object_idx {
                return Err(Error::Ingestion(format!(
                    "scene {}: relation {} relates an entity to itself",
                    self.image_id, i
                )));
            }
        }
        for (i, e) in self.entities.iter().enumerate() {
            e.bbox.validate().map_err(|err| {
                Error::Ingestion(format!("scene {}: entity {}: {}", self.image_id, i, err))
            })?;
        }
        Ok(())
    }

    /// Distinct ordered (subject, object) pairs that carry at least one
    /// annotated relation, sorted ascending. This is the candidate pair list
    /// used for ranking, so its order is part of the evaluation contract.
    pub fn candidate_pairs(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self
            .relations
            .iter()
            .map(|r| (r.subject_idx, r.object_idx))
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyKind {
    Object,
    Predicate,
}

/// Immutable name <-> id mapping. Ids are assigned by sorted name order when
/// built from observed annotations, so a vocabulary is a pure function of the
/// set of names it contains.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabularySerde", into = "VocabularySerde")]
pub struct Vocabulary {
    kind: VocabularyKind,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularySerde {
    kind: VocabularyKind,
    names: Vec<String>,
}

impl TryFrom<VocabularySerde> for Vocabulary {
    type Error = Error;
    fn try_from(v: VocabularySerde) -> Result<Self> {
        Vocabulary::from_names(v.kind, v.names)
    }
}

impl From<Vocabulary> for VocabularySerde {
    fn from(v: Vocabulary) -> Self {
        VocabularySerde {
            kind: v.kind,
            names: v.names,
        }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.names == other.names
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit name list, preserving its order.
    /// Duplicate names are rejected.
    pub fn from_names(kind: VocabularyKind, names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Ingestion(format!(
                    "duplicate vocabulary name {n:?}"
                )));
            }
        }
        Ok(Vocabulary { kind, names, index })
    }

    /// Builds a vocabulary from observed labels: names are deduplicated and
    /// sorted so the id assignment is independent of annotation order.
    pub fn from_observed<I: IntoIterator<Item = String>>(kind: VocabularyKind, it: I) -> Self {
        let set: BTreeSet<String> = it.into_iter().collect();
        Self::from_names(kind, set.into_iter().collect())
            .expect("sorted set cannot contain duplicates")
    }

    pub fn kind(&self) -> VocabularyKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Image-id partition into train/val/test. The three lists are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for id in self
            .train
            .iter()
            .chain(self.val.iter())
            .chain(self.test.iter())
        {
            if !seen.insert(id) {
                return Err(Error::Ingestion(format!(
                    "image {id:?} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.train.iter().any(|s| s == image_id)
            || self.val.iter().any(|s| s == image_id)
            || self.test.iter().any(|s| s == image_id)
    }
}

/// Renders a relation as the text fed to the language encoder.
pub fn triplet_text(subject: &str, predicate: &str, object: &str) -> String {
    format!("{subject} {predicate} {object}")
}

/// Candidate triplet list for pseudo-label retrieval.
///
/// `entries` hold "subject predicate object" strings; `embeddings`, when
/// present, hold the text embedding of each entry at the same index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TripletVocabulary {
    pub entries: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embeddings: Option<Vec<crate::embed::EmbeddingVector>>,
}

impl TripletVocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Collects the distinct relation triplets observed in `scenes` and renders
/// each as text. Entries are deduplicated and sorted, so the result is a pure
/// function of the annotation content.
pub fn build_triplet_vocabulary(
    scenes: &[Scene],
    objects: &Vocabulary,
    predicates: &Vocabulary,
) -> Result<TripletVocabulary> {
    let mut set = BTreeSet::new();
    for scene in scenes {
        for r in &scene.relations {
            let subj = scene
                .entities
                .get(r.subject_idx)
                .and_then(|e| objects.name(e.label_id));
            let obj = scene
                .entities
                .get(r.object_idx)
                .and_then(|e| objects.name(e.label_id));
            let pred = predicates.name(r.predicate_id);
            match (subj, pred, obj) {
                (Some(s), Some(p), Some(o)) => {
                    set.insert(triplet_text(s, p, o));
                }
                _ => {
                    return Err(Error::Ingestion(format!(
                        "scene {}: relation references unknown vocabulary entry",
                        scene.image_id
                    )))
                }
            }
        }
    }
    Ok(TripletVocabulary {
        entries: set.into_iter().collect(),
        embeddings: None,
    })
}
