//! Synthetic scene-graph generator.
//!
//! Produces annotation-compatible scenes plus two kinds of ground truth that
//! real data cannot supply: a planted translational structure in embedding
//! space (for verifying that the predicate head can recover a known decision
//! rule) and a latent "world" describing what each region depicts (so the
//! encoder stub can plant a known cross-modal alignment between region
//! embeddings and description text).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    BoundingBox, DatasetSplit, Entity, RelationInstance, Scene, Vocabulary, VocabularyKind,
};
use crate::error::{Error, Result};
use crate::geometry::{location_feature, union_box};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_scenes: usize,
    pub n_objects: usize,
    pub n_predicates: usize,
    /// Relative predicate frequencies; empty means uniform. Need not sum
    /// to one.
    pub skew: Vec<f64>,
    pub seed: u64,
    /// Dimension of the planted translational embeddings.
    pub embed_dim: usize,
    /// Noise added to planted union embeddings.
    pub noise_sigma: f64,
    pub entities_per_scene: (usize, usize),
    pub relations_per_scene: (usize, usize),
    pub image_size: (f64, f64),
    /// Probability that a relation's predicate is a fixed function of the
    /// (subject label, object label) pair rather than a marginal draw.
    pub pair_affinity: f64,
    /// Planted cosine between union regions and their triplet text.
    pub union_alignment: f64,
    /// Planted cosine between entity crops and their label text.
    pub entity_alignment: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_scenes: 60,
            n_objects: 12,
            n_predicates: 8,
            skew: Vec::new(),
            seed: 7,
            embed_dim: 32,
            noise_sigma: 0.1,
            entities_per_scene: (3, 5),
            relations_per_scene: (2, 4),
            image_size: (256.0, 256.0),
            pair_affinity: 0.0,
            union_alignment: 0.7,
            entity_alignment: 0.4,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

/// What a synthetic region depicts. The encoder stub turns this into an
/// embedding with a known alignment to the description text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionContent {
    Entity {
        label: String,
    },
    Union {
        subject: String,
        predicate: String,
        object: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLatent {
    pub bbox: BoundingBox,
    pub content: RegionContent,
    /// Seeds the region's image-specific nuisance direction.
    pub nuisance_seed: u64,
}

/// Latent visual description of every scene, plus the planted alignment
/// strengths the encoder stub should honor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub union_alignment: f64,
    pub entity_alignment: f64,
    pub scenes: BTreeMap<String, Vec<RegionLatent>>,
}

/// Ground-truth translational geometry: `u = s + o + offset[predicate]`
/// plus gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStructure {
    pub embed_dim: usize,
    /// One unit vector per object label.
    pub label_vectors: Vec<Vec<f64>>,
    /// One offset vector per predicate.
    pub predicate_offsets: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// `pair_predicate[a][b]` is the predicate deterministically associated
    /// with (subject label a, object label b) draws under `pair_affinity`.
    pub pair_predicate: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub scenes: Vec<Scene>,
    pub objects: Vocabulary,
    pub predicates: Vocabulary,
    pub split: DatasetSplit,
    pub planted: PlantedStructure,
    pub world: SyntheticWorld,
}

fn unit_gaussian(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Draws an index proportionally to `weights`.
fn sample_categorical(rng: &mut ChaCha20Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if t < *w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

fn validate_config(cfg: &SyntheticConfig) -> Result<Vec<f64>> {
    if cfg.n_scenes == 0 || cfg.n_objects < 2 || cfg.n_predicates == 0 {
        return Err(Error::InvalidArgument(
            "synthetic config needs scenes, at least two object labels, and predicates".into(),
        ));
    }
    if cfg.entities_per_scene.0 < 2 || cfg.entities_per_scene.0 > cfg.entities_per_scene.1 {
        return Err(Error::InvalidArgument(
            "entities_per_scene must be an increasing range starting at 2 or more".into(),
        ));
    }
    if cfg.relations_per_scene.0 > cfg.relations_per_scene.1 {
        return Err(Error::InvalidArgument(
            "relations_per_scene range is inverted".into(),
        ));
    }
    if !(cfg.image_size.0 >= 32.0 && cfg.image_size.1 >= 32.0) {
        return Err(Error::InvalidArgument(
            "synthetic images must be at least 32x32".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.pair_affinity)
        || !(0.0..=1.0).contains(&cfg.union_alignment)
        || !(0.0..=1.0).contains(&cfg.entity_alignment)
    {
        return Err(Error::InvalidArgument(
            "affinity and alignment values must be in [0, 1]".into(),
        ));
    }
    if cfg.train_frac < 0.0 || cfg.val_frac < 0.0 || cfg.train_frac + cfg.val_frac > 1.0 {
        return Err(Error::InvalidArgument("split fractions are invalid".into()));
    }
    let skew = if cfg.skew.is_empty() {
        vec![1.0; cfg.n_predicates]
    } else {
        if cfg.skew.len() != cfg.n_predicates {
            return Err(Error::InvalidArgument(format!(
                "skew has {} entries for {} predicates",
                cfg.skew.len(),
                cfg.n_predicates
            )));
        }
        if cfg.skew.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "skew weights must be positive and finite".into(),
            ));
        }
        cfg.skew.clone()
    };
    Ok(skew)
}

pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let skew = validate_config(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let objects = Vocabulary::from_names(
        VocabularyKind::Object,
        (0..cfg.n_objects).map(|i| format!("obj{i:03}")).collect(),
    )?;
    let predicates = Vocabulary::from_names(
        VocabularyKind::Predicate,
        (0..cfg.n_predicates)
            .map(|i| format!("rel{i:03}"))
            .collect(),
    )?;

    let label_vectors: Vec<Vec<f64>> = (0..cfg.n_objects)
        .map(|_| unit_gaussian(&mut rng, cfg.embed_dim))
        .collect();
    let predicate_offsets: Vec<Vec<f64>> = (0..cfg.n_predicates)
        .map(|_| unit_gaussian(&mut rng, cfg.embed_dim))
        .collect();
    let pair_predicate: Vec<Vec<usize>> = (0..cfg.n_objects)
        .map(|_| {
            (0..cfg.n_objects)
                .map(|_| sample_categorical(&mut rng, &skew))
                .collect()
        })
        .collect();

    let (img_w, img_h) = cfg.image_size;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut world_scenes = BTreeMap::new();

    for scene_idx in 0..cfg.n_scenes {
        let image_id = format!("synth{scene_idx:05}");
        let n_entities =
            rng.gen_range(cfg.entities_per_scene.0..=cfg.entities_per_scene.1);
        let mut entities = Vec::with_capacity(n_entities);
        for _ in 0..n_entities {
            let label_id = rng.gen_range(0..cfg.n_objects);
            let w = rng.gen_range(24..=(img_w as i64 / 3).max(25)) as f64;
            let h = rng.gen_range(24..=(img_h as i64 / 3).max(25)) as f64;
            let x = rng.gen_range(0..=(img_w - w) as i64) as f64;
            let y = rng.gen_range(0..=(img_h - h) as i64) as f64;
            entities.push(Entity {
                label_id,
                bbox: BoundingBox::new(x, y, w, h)?,
            });
        }

        // One relation per distinct ordered pair, so union regions have an
        // unambiguous description.
        let mut pairs: Vec<(usize, usize)> = (0..n_entities)
            .flat_map(|i| (0..n_entities).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        pairs.shuffle(&mut rng);
        let want = rng.gen_range(cfg.relations_per_scene.0..=cfg.relations_per_scene.1);
        let n_relations = want.min(pairs.len());
        let mut relations = Vec::with_capacity(n_relations);
        for &(si, oi) in pairs.iter().take(n_relations) {
            let s_label = entities[si].label_id;
            let o_label = entities[oi].label_id;
            let predicate_id = if rng.gen_range(0.0..1.0) < cfg.pair_affinity {
                pair_predicate[s_label][o_label]
            } else {
                sample_categorical(&mut rng, &skew)
            };
            relations.push(RelationInstance {
                subject_idx: si,
                object_idx: oi,
                predicate_id,
            });
        }

        let scene = Scene {
            image_id: image_id.clone(),
            width: img_w,
            height: img_h,
            entities,
            relations,
        };
        scene.validate()?;

        let mut regions = Vec::new();
        for e in &scene.entities {
            regions.push(RegionLatent {
                bbox: e.bbox,
                content: RegionContent::Entity {
                    label: objects.name(e.label_id).unwrap().to_string(),
                },
                nuisance_seed: rng.gen(),
            });
        }
        for r in &scene.relations {
            let u = union_box(
                &scene.entities[r.subject_idx].bbox,
                &scene.entities[r.object_idx].bbox,
            )?;
            regions.push(RegionLatent {
                bbox: u,
                content: RegionContent::Union {
                    subject: objects
                        .name(scene.entities[r.subject_idx].label_id)
                        .unwrap()
                        .to_string(),
                    predicate: predicates.name(r.predicate_id).unwrap().to_string(),
                    object: objects
                        .name(scene.entities[r.object_idx].label_id)
                        .unwrap()
                        .to_string(),
                },
                nuisance_seed: rng.gen(),
            });
        }
        world_scenes.insert(image_id, regions);
        scenes.push(scene);
    }

    let n_train = (cfg.train_frac * cfg.n_scenes as f64).floor() as usize;
    let n_val = (cfg.val_frac * cfg.n_scenes as f64).floor() as usize;
    let ids: Vec<String> = scenes.iter().map(|s| s.image_id.clone()).collect();
    let split = DatasetSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    split.validate()?;

    Ok(SyntheticDataset {
        scenes,
        objects,
        predicates,
        split,
        planted: PlantedStructure {
            embed_dim: cfg.embed_dim,
            label_vectors,
            predicate_offsets,
            noise_sigma: cfg.noise_sigma,
            pair_predicate,
        },
        world: SyntheticWorld {
            union_alignment: cfg.union_alignment,
            entity_alignment: cfg.entity_alignment,
            scenes: world_scenes,
        },
    })
}

/// A relation rendered in the planted embedding space, ready to feed the
/// predicate head.
#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub image_id: String,
    pub subject_idx: usize,
    pub object_idx: usize,
    pub s: Vec<f64>,
    pub o: Vec<f64>,
    pub u: Vec<f64>,
    pub loc: [f64; 19],
    pub predicate_id: usize,
}

/// Materializes `u = s + o + offset[predicate] + sigma * noise` for every
/// relation of `scenes`, in scene order. The noise stream is seeded, so the
/// same call is bit-reproducible.
pub fn materialize_planted(
    scenes: &[Scene],
    planted: &PlantedStructure,
    seed: u64,
) -> Result<Vec<PlantedSample>> {
    let dim = planted.embed_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for scene in scenes {
        scene.validate()?;
        for r in &scene.relations {
            let s_vec = planted
                .label_vectors
                .get(scene.entities[r.subject_idx].label_id)
                .ok_or_else(|| {
                    Error::InvalidArgument("label outside planted structure".into())
                })?;
            let o_vec = planted
                .label_vectors
                .get(scene.entities[r.object_idx].label_id)
                .ok_or_else(|| {
                    Error::InvalidArgument("label outside planted structure".into())
                })?;
            let offset = planted.predicate_offsets.get(r.predicate_id).ok_or_else(|| {
                Error::InvalidArgument("predicate outside planted structure".into())
            })?;
            let mut u = vec![0.0f64; dim];
            for i in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                u[i] = s_vec[i] + o_vec[i] + offset[i] + planted.noise_sigma * noise;
            }
            let loc = location_feature(
                &scene.entities[r.subject_idx].bbox,
                &scene.entities[r.object_idx].bbox,
                scene.width,
                scene.height,
            )?
            .concat();
            out.push(PlantedSample {
                image_id: scene.image_id.clone(),
                subject_idx: r.subject_idx,
                object_idx: r.object_idx,
                s: s_vec.clone(),
                o: o_vec.clone(),
                u,
                loc,
                predicate_id: r.predicate_id,
            });
        }
    }
    Ok(out)
}
