//! Pipeline stages. Each stage reads its predecessors' artifacts, writes
//! its own plus a manifest, and is a no-op when nothing changed. The
//! embedding cache is deliberately not an artifact: it is a shared,
//! append-only accelerator whose content never alters results.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::manifest::{
    check_freshness, hash_file, hash_value, write_manifest, Freshness, StageManifest,
};
use crepe_core::baseline::FreqBaseline;
use crepe_core::calibrate::{estimate_frequencies, CalibrationTable};
use crepe_core::data::synthetic::{generate_synthetic_dataset, SyntheticWorld};
use crepe_core::data::vg::{load_annotations, SplitSpec};
use crepe_core::data::{
    build_triplet_vocabulary, DatasetSplit, Scene, TripletVocabulary, Vocabulary,
};
use crepe_core::embed::tokenizer::fnv1a64;
use crepe_core::embed::{
    retrieve_pseudo_labels, CachedEncoder, EmbeddingCache, StubEncoder, StubEncoderConfig,
};
use crepe_core::features::{FeatureContext, FeatureMode, RegionLookup, SampleConfig};
use crepe_core::geometry::union_box;
use crepe_core::head::{
    classify_sample, init_head, predict_scene, train_head, HeadConfig, HeadTrainConfig,
    PairPrediction, PredicateHeadState,
};
use crepe_core::metrics::{
    evaluate, gt_triplets, mean_recall_csv, per_predicate_csv, rank_scene, EvalReport,
    ScenePredictions,
};
use crepe_core::prompt::{
    init_prompt_learner, train_prompt_learner, PromptConfig, PromptLearnerState, PromptSample,
    PromptTrainConfig,
};

/// Relative artifact paths under the output directory.
pub mod artifact {
    pub const SCENES: &str = "dataset/scenes.json";
    pub const OBJECTS: &str = "dataset/objects.json";
    pub const PREDICATES: &str = "dataset/predicates.json";
    pub const SPLIT: &str = "dataset/split.json";
    pub const WORLD: &str = "dataset/world.json";
    pub const PLANTED: &str = "dataset/planted.json";
    pub const TRIPLETS: &str = "dataset/triplets.json";
    pub const TRIPLETS_EMBEDDED: &str = "dataset/triplets_embedded.json";
    pub const PSEUDO_LABELS: &str = "pseudo_labels.json";
    pub const PROMPT_CKPT: &str = "prompt.ckpt";
    pub const PROMPT_LOSS: &str = "prompt_loss.csv";
    pub const HEAD_CKPT: &str = "head.ckpt";
    pub const HEAD_TRACE: &str = "head_trace.csv";
    pub const CALIBRATION: &str = "calibration.json";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const REPORT: &str = "report.json";
    pub const MEAN_RECALL_CSV: &str = "mean_recall.csv";
    pub const PER_PREDICATE_CSV: &str = "per_predicate.csv";
    pub const BASELINE_PREDICTIONS: &str = "baseline/predictions.jsonl";
    pub const BASELINE_REPORT: &str = "baseline/report.json";
    pub const BASELINE_MEAN_RECALL_CSV: &str = "baseline/mean_recall.csv";
    pub const BASELINE_PER_PREDICATE_CSV: &str = "baseline/per_predicate.csv";
}

/// Seed offsets deriving per-stage seeds from the config seed.
const PROMPT_SEED_OFFSET: u64 = 1;
const HEAD_SEED_OFFSET: u64 = 2;
const NEGATIVES_SEED_OFFSET: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    BuildVocab,
    Embed,
    Retrieve,
    TrainPrompts,
    TrainHead,
    Calibrate,
    Evaluate,
    Baseline,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildVocab => "build-vocab",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::TrainPrompts => "train-prompts",
            Stage::TrainHead => "train-head",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub skipped: bool,
    pub outputs: Vec<String>,
}

/// One retrieval result set per training relation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub subject_idx: usize,
    pub object_idx: usize,
    pub labels: Vec<PseudoLabelEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    pub index: usize,
    pub triplet: String,
    pub similarity: f64,
}

/// Per-class calibration factors with the provenance needed to audit them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub betas: Vec<NamedBeta>,
    pub floored: Vec<String>,
    pub provenance: CalibrationProvenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedBeta {
    pub predicate: String,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationProvenance {
    pub split: String,
    pub head_checkpoint: String,
    pub config_hash: String,
}

/// One scene's dumped predictions: every candidate pair with its real
/// predicate scores ranked best first.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionLine {
    image_id: String,
    pairs: Vec<PairLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairLine {
    s: usize,
    o: usize,
    top: Vec<(String, f64)>,
}

fn save_json<T: Serialize>(out_dir: &Path, rel: &str, value: &T) -> Result<()> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(
    out_dir: &Path,
    rel: &str,
    producer: &'static str,
) -> Result<T> {
    let path = out_dir.join(rel);
    if !path.exists() {
        return Err(CliError::MissingDependency {
            path,
            stage: producer,
        });
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
}

fn require_file(out_dir: &Path, rel: &str, producer: &'static str) -> Result<PathBuf> {
    let path = out_dir.join(rel);
    if !path.exists() {
        return Err(CliError::MissingDependency {
            path,
            stage: producer,
        });
    }
    Ok(path)
}

/// The bundled encoder reads synthetic latent scenes; real-image runs need
/// an image-backed encoder (see the README recipe).
fn require_region_support(cfg: &PipelineConfig) -> Result<()> {
    if cfg.dataset.source == "vg" {
        return Err(CliError::Config {
            path: cfg.out_dir.join(artifact::WORLD),
            message: "region embeddings for vg data need an image-backed encoder; \
                      the bundled backend consumes synthetic latent scenes only"
                .into(),
        });
    }
    Ok(())
}

fn open_encoder(cfg: &PipelineConfig) -> Result<CachedEncoder> {
    let dir = cfg.cache_dir();
    std::fs::create_dir_all(&dir)?;
    let cache = EmbeddingCache::open(&dir.join("embeddings.bin"), cfg.encoder.embed_dim)?;
    let stub = StubEncoder::new(StubEncoderConfig {
        seed: cfg.encoder.seed,
        token_dim: cfg.encoder.token_dim,
        embed_dim: cfg.encoder.embed_dim,
        hash_space: cfg.encoder.hash_space,
    })?;
    // Region content is a function of the dataset section and the base seed;
    // tagging keys with it lets runs share one cache directory safely.
    let world = serde_json::to_vec(&(&cfg.dataset, cfg.seed))?;
    Ok(CachedEncoder::new(Box::new(stub), Some(cache)).with_world_tag(fnv1a64(&world)))
}

struct LoadedDataset {
    scenes: Vec<Scene>,
    objects: Vocabulary,
    predicates: Vocabulary,
    split: DatasetSplit,
}

fn load_dataset(out_dir: &Path) -> Result<LoadedDataset> {
    Ok(LoadedDataset {
        scenes: load_json(out_dir, artifact::SCENES, "ingest")?,
        objects: load_json(out_dir, artifact::OBJECTS, "ingest")?,
        predicates: load_json(out_dir, artifact::PREDICATES, "ingest")?,
        split: load_json(out_dir, artifact::SPLIT, "ingest")?,
    })
}

fn load_world(out_dir: &Path) -> Result<SyntheticWorld> {
    load_json(out_dir, artifact::WORLD, "ingest")
}

fn scenes_in<'a>(scenes: &'a [Scene], ids: &[String]) -> Vec<&'a Scene> {
    scenes
        .iter()
        .filter(|s| ids.iter().any(|id| id == &s.image_id))
        .collect()
}

fn owned(scenes: &[&Scene]) -> Vec<Scene> {
    scenes.iter().map(|s| (*s).clone()).collect()
}

/// Mode-dependent prerequisites for feature assembly.
struct ModeData {
    triplets: Option<TripletVocabulary>,
    prompts: Option<PromptLearnerState>,
}

fn load_mode_data(cfg: &PipelineConfig, mode: FeatureMode) -> Result<ModeData> {
    let mut data = ModeData {
        triplets: None,
        prompts: None,
    };
    match mode {
        FeatureMode::PseudoLabels { .. } => {
            data.triplets =
                Some(load_json(&cfg.out_dir, artifact::TRIPLETS_EMBEDDED, "embed")?);
        }
        FeatureMode::LearnedPrompt => {
            let path = require_file(&cfg.out_dir, artifact::PROMPT_CKPT, "train-prompts")?;
            data.prompts = Some(PromptLearnerState::load(&path)?);
        }
        FeatureMode::Visual | FeatureMode::VisualLanguage => {}
    }
    Ok(data)
}

fn feature_context<'a>(
    cfg: &PipelineConfig,
    encoder: &'a CachedEncoder,
    objects: &'a Vocabulary,
    mode: FeatureMode,
    data: &'a ModeData,
) -> FeatureContext<'a> {
    FeatureContext {
        encoder,
        objects,
        mode,
        triplets: data.triplets.as_ref(),
        prompts: data.prompts.as_ref(),
        feature_scale: cfg.head.feature_scale,
    }
}

/// Input artifacts of a stage: (manifest key, producing stage). External
/// files (the vg annotation source) use their own path as the key.
fn input_specs(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<(String, &'static str)>> {
    use artifact::*;
    let mode = cfg.feature_mode()?;
    let dataset_core = || {
        vec![
            (SCENES.to_string(), "ingest"),
            (OBJECTS.to_string(), "ingest"),
            (PREDICATES.to_string(), "ingest"),
            (SPLIT.to_string(), "ingest"),
        ]
    };
    let mode_extra = |v: &mut Vec<(String, &'static str)>| {
        match mode {
            FeatureMode::PseudoLabels { .. } => {
                v.push((TRIPLETS_EMBEDDED.to_string(), "embed"));
            }
            FeatureMode::LearnedPrompt => v.push((PROMPT_CKPT.to_string(), "train-prompts")),
            FeatureMode::Visual | FeatureMode::VisualLanguage => {}
        }
    };
    Ok(match stage {
        Stage::Ingest => match cfg.dataset.source.as_str() {
            "vg" => {
                let path = cfg.dataset.annotations.clone().expect("validated");
                if !path.exists() {
                    return Err(CliError::Config {
                        path,
                        message: "annotation file not found".into(),
                    });
                }
                vec![(path.display().to_string(), "ingest")]
            }
            _ => vec![],
        },
        Stage::BuildVocab => dataset_core(),
        Stage::Embed => {
            require_region_support(cfg)?;
            vec![
                (TRIPLETS.to_string(), "build-vocab"),
                (SCENES.to_string(), "ingest"),
                (WORLD.to_string(), "ingest"),
            ]
        }
        Stage::Retrieve => {
            require_region_support(cfg)?;
            vec![
                (TRIPLETS_EMBEDDED.to_string(), "embed"),
                (SCENES.to_string(), "ingest"),
                (SPLIT.to_string(), "ingest"),
                (WORLD.to_string(), "ingest"),
            ]
        }
        Stage::TrainPrompts => {
            require_region_support(cfg)?;
            vec![
                (SCENES.to_string(), "ingest"),
                (SPLIT.to_string(), "ingest"),
                (OBJECTS.to_string(), "ingest"),
                (WORLD.to_string(), "ingest"),
                (TRIPLETS_EMBEDDED.to_string(), "embed"),
                (PSEUDO_LABELS.to_string(), "retrieve"),
            ]
        }
        Stage::TrainHead => {
            require_region_support(cfg)?;
            let mut v = dataset_core();
            v.push((WORLD.to_string(), "ingest"));
            mode_extra(&mut v);
            v
        }
        Stage::Calibrate => {
            require_region_support(cfg)?;
            let mut v = dataset_core();
            v.push((WORLD.to_string(), "ingest"));
            v.push((HEAD_CKPT.to_string(), "train-head"));
            mode_extra(&mut v);
            v
        }
        Stage::Evaluate => {
            require_region_support(cfg)?;
            let mut v = dataset_core();
            v.push((WORLD.to_string(), "ingest"));
            v.push((HEAD_CKPT.to_string(), "train-head"));
            v.push((CALIBRATION.to_string(), "calibrate"));
            mode_extra(&mut v);
            v
        }
        Stage::Baseline => dataset_core(),
    })
}

/// The config fields each stage actually reads. Stages ignore the rest, so
/// e.g. changing the ablation mode does not invalidate ingestion.
fn stage_config(cfg: &PipelineConfig, stage: Stage) -> serde_json::Value {
    let enc = serde_json::json!({
        "seed": cfg.encoder.seed,
        "token_dim": cfg.encoder.token_dim,
        "embed_dim": cfg.encoder.embed_dim,
        "hash_space": cfg.encoder.hash_space,
    });
    match stage {
        Stage::Ingest => serde_json::json!({"dataset": cfg.dataset, "seed": cfg.seed}),
        Stage::BuildVocab | Stage::Baseline => serde_json::json!({}),
        Stage::Embed => serde_json::json!({"encoder": enc}),
        Stage::Retrieve => serde_json::json!({"encoder": enc, "pseudo_k": cfg.pseudo_k}),
        Stage::TrainPrompts => {
            serde_json::json!({"encoder": enc, "prompt": cfg.prompt, "seed": cfg.seed})
        }
        Stage::TrainHead | Stage::Calibrate | Stage::Evaluate => serde_json::json!({
            "encoder": enc,
            "head": cfg.head,
            "mode": cfg.mode,
            "pseudo_k": cfg.pseudo_k,
            "seed": cfg.seed,
        }),
    }
}

fn hash_inputs(
    out_dir: &Path,
    specs: &[(String, &'static str)],
) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    for (key, producer) in specs {
        let path = if Path::new(key).is_absolute() {
            PathBuf::from(key)
        } else {
            require_file(out_dir, key, producer)?
        };
        inputs.insert(key.clone(), hash_file(&path)?);
    }
    Ok(inputs)
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    let specs = input_specs(cfg, stage)?;
    let inputs = hash_inputs(&cfg.out_dir, &specs)?;
    let config_hash = hash_value(&stage_config(cfg, stage));
    if check_freshness(&cfg.out_dir, stage.name(), &config_hash, &inputs)?
        == Freshness::UpToDate
    {
        log::info!("{}: up to date", stage.name());
        return Ok(StageOutcome {
            stage: stage.name(),
            skipped: true,
            outputs: vec![],
        });
    }

    let outputs = match stage {
        Stage::Ingest => run_ingest(cfg)?,
        Stage::BuildVocab => run_build_vocab(cfg)?,
        Stage::Embed => run_embed(cfg)?,
        Stage::Retrieve => run_retrieve(cfg)?,
        Stage::TrainPrompts => run_train_prompts(cfg)?,
        Stage::TrainHead => run_train_head(cfg)?,
        Stage::Calibrate => run_calibrate(cfg)?,
        Stage::Evaluate => run_evaluate(cfg)?,
        Stage::Baseline => run_baseline(cfg)?,
    };

    let mut output_hashes = BTreeMap::new();
    for rel in &outputs {
        output_hashes.insert(rel.clone(), hash_file(&cfg.out_dir.join(rel))?);
    }
    write_manifest(
        &cfg.out_dir,
        &StageManifest {
            stage: stage.name().to_string(),
            config_hash,
            config: serde_json::to_value(cfg)?,
            inputs,
            outputs: output_hashes,
        },
    )?;
    log::info!("{}: wrote {} artifacts", stage.name(), outputs.len());
    Ok(StageOutcome {
        stage: stage.name(),
        skipped: false,
        outputs,
    })
}

/// Every stage in dependency order for the configured mode. Prompt
/// training only runs when the mode consumes it.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    let mode = cfg.feature_mode()?;
    let mut stages = vec![Stage::Ingest, Stage::BuildVocab, Stage::Embed, Stage::Retrieve];
    if mode == FeatureMode::LearnedPrompt {
        stages.push(Stage::TrainPrompts);
    }
    stages.extend([
        Stage::TrainHead,
        Stage::Calibrate,
        Stage::Evaluate,
        Stage::Baseline,
    ]);
    stages.into_iter().map(|s| run_stage(cfg, s)).collect()
}

fn run_ingest(cfg: &PipelineConfig) -> Result<Vec<String>> {
    use artifact::*;
    let out = &cfg.out_dir;
    match cfg.dataset.source.as_str() {
        "synthetic" => {
            let dataset = generate_synthetic_dataset(&cfg.dataset.synthetic(cfg.seed))?;
            save_json(out, SCENES, &dataset.scenes)?;
            save_json(out, OBJECTS, &dataset.objects)?;
            save_json(out, PREDICATES, &dataset.predicates)?;
            save_json(out, SPLIT, &dataset.split)?;
            save_json(out, WORLD, &dataset.world)?;
            save_json(out, PLANTED, &dataset.planted)?;
            Ok(vec![
                SCENES.into(),
                OBJECTS.into(),
                PREDICATES.into(),
                SPLIT.into(),
                WORLD.into(),
                PLANTED.into(),
            ])
        }
        _ => {
            let path = cfg.dataset.annotations.as_ref().expect("validated");
            let report = load_annotations(
                path,
                &SplitSpec::Ratio {
                    train: cfg.dataset.train_frac,
                    val: cfg.dataset.val_frac,
                    seed: cfg.dataset.split_seed,
                },
                None,
                None,
            )?;
            if report.dropped_entities > 0 || report.dropped_relations > 0 {
                log::warn!(
                    "ingest dropped {} entities and {} relations",
                    report.dropped_entities,
                    report.dropped_relations
                );
            }
            save_json(out, SCENES, &report.scenes)?;
            save_json(out, OBJECTS, &report.objects)?;
            save_json(out, PREDICATES, &report.predicates)?;
            save_json(out, SPLIT, &report.split)?;
            Ok(vec![
                SCENES.into(),
                OBJECTS.into(),
                PREDICATES.into(),
                SPLIT.into(),
            ])
        }
    }
}

fn run_build_vocab(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let data = load_dataset(&cfg.out_dir)?;
    let train = scenes_in(&data.scenes, &data.split.train);
    let vocab = build_triplet_vocabulary(&owned(&train), &data.objects, &data.predicates)?;
    save_json(&cfg.out_dir, artifact::TRIPLETS, &vocab)?;
    Ok(vec![artifact::TRIPLETS.into()])
}

fn run_embed(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let mut vocab: TripletVocabulary =
        load_json(&cfg.out_dir, artifact::TRIPLETS, "build-vocab")?;
    let scenes: Vec<Scene> = load_json(&cfg.out_dir, artifact::SCENES, "ingest")?;
    let world = load_world(&cfg.out_dir)?;
    let encoder = open_encoder(cfg)?;

    let mut embeddings = Vec::with_capacity(vocab.entries.len());
    for entry in &vocab.entries {
        embeddings.push(encoder.text(entry)?);
    }
    vocab.embeddings = Some(embeddings);
    save_json(&cfg.out_dir, artifact::TRIPLETS_EMBEDDED, &vocab)?;

    // Warm the region cache so later stages hit it instead of re-encoding.
    for scene in &scenes {
        let source = world.source(&scene.image_id).ok_or_else(|| {
            crepe_core::Error::MissingEmbedding(format!(
                "no image content for scene {}",
                scene.image_id
            ))
        })?;
        for entity in &scene.entities {
            encoder.region(&scene.image_id, &source, &entity.bbox)?;
        }
        for r in &scene.relations {
            let ubox = union_box(
                &scene.entities[r.subject_idx].bbox,
                &scene.entities[r.object_idx].bbox,
            )?;
            encoder.region(&scene.image_id, &source, &ubox)?;
        }
    }
    let (hits, misses) = encoder.stats();
    log::info!("embed: cache hits {hits}, misses {misses}");
    Ok(vec![artifact::TRIPLETS_EMBEDDED.into()])
}

fn run_retrieve(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let vocab: TripletVocabulary =
        load_json(&cfg.out_dir, artifact::TRIPLETS_EMBEDDED, "embed")?;
    let scenes: Vec<Scene> = load_json(&cfg.out_dir, artifact::SCENES, "ingest")?;
    let split: DatasetSplit = load_json(&cfg.out_dir, artifact::SPLIT, "ingest")?;
    let world = load_world(&cfg.out_dir)?;
    let encoder = open_encoder(cfg)?;

    let mut records = Vec::new();
    for scene in scenes_in(&scenes, &split.train) {
        let source = world.source(&scene.image_id).ok_or_else(|| {
            crepe_core::Error::MissingEmbedding(format!(
                "no image content for scene {}",
                scene.image_id
            ))
        })?;
        for r in &scene.relations {
            let ubox = union_box(
                &scene.entities[r.subject_idx].bbox,
                &scene.entities[r.object_idx].bbox,
            )?;
            let u_img = encoder.region(&scene.image_id, &source, &ubox)?;
            let top = retrieve_pseudo_labels(&u_img, &vocab, cfg.pseudo_k)?;
            records.push(PseudoLabelRecord {
                image_id: scene.image_id.clone(),
                subject_idx: r.subject_idx,
                object_idx: r.object_idx,
                labels: top
                    .into_iter()
                    .map(|l| PseudoLabelEntry {
                        index: l.index,
                        triplet: l.triplet,
                        similarity: l.similarity,
                    })
                    .collect(),
            });
        }
    }
    save_json(&cfg.out_dir, artifact::PSEUDO_LABELS, &records)?;
    Ok(vec![artifact::PSEUDO_LABELS.into()])
}

fn run_train_prompts(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let data = load_dataset(&cfg.out_dir)?;
    let world = load_world(&cfg.out_dir)?;
    let vocab: TripletVocabulary =
        load_json(&cfg.out_dir, artifact::TRIPLETS_EMBEDDED, "embed")?;
    let records: Vec<PseudoLabelRecord> =
        load_json(&cfg.out_dir, artifact::PSEUDO_LABELS, "retrieve")?;
    let encoder = open_encoder(cfg)?;
    let embeddings = vocab.embeddings.as_ref().ok_or_else(|| {
        crepe_core::Error::MissingEmbedding(
            "triplet vocabulary artifact has no embeddings".into(),
        )
    })?;

    let by_id: BTreeMap<&str, &Scene> = data
        .scenes
        .iter()
        .map(|s| (s.image_id.as_str(), s))
        .collect();
    let mut samples = Vec::with_capacity(records.len());
    for rec in &records {
        let scene = by_id.get(rec.image_id.as_str()).ok_or_else(|| {
            crepe_core::Error::InvalidArgument(format!(
                "pseudo-label record references unknown scene {}",
                rec.image_id
            ))
        })?;
        let source = world.source(&scene.image_id).ok_or_else(|| {
            crepe_core::Error::MissingEmbedding(format!(
                "no image content for scene {}",
                scene.image_id
            ))
        })?;
        let ubox = union_box(
            &scene.entities[rec.subject_idx].bbox,
            &scene.entities[rec.object_idx].bbox,
        )?;
        let u_img = encoder.region(&scene.image_id, &source, &ubox)?;
        let top = rec.labels.first().ok_or_else(|| {
            crepe_core::Error::InvalidArgument(format!(
                "empty retrieval for scene {} pair ({}, {})",
                rec.image_id, rec.subject_idx, rec.object_idx
            ))
        })?;
        let name = |idx: usize| -> Result<String> {
            let label = scene.entities[idx].label_id;
            Ok(data
                .objects
                .name(label)
                .ok_or_else(|| {
                    crepe_core::Error::InvalidArgument(format!(
                        "label id {label} outside the object vocabulary"
                    ))
                })?
                .to_string())
        };
        samples.push(PromptSample {
            id: format!("{}:({},{})", rec.image_id, rec.subject_idx, rec.object_idx),
            subject: name(rec.subject_idx)?,
            object: name(rec.object_idx)?,
            u_img,
            pseudo_txt: embeddings[top.index].clone(),
        });
    }

    let state = init_prompt_learner(PromptConfig {
        context_tokens: cfg.prompt.context_tokens,
        embed_dim: cfg.encoder.embed_dim,
        token_dim: cfg.encoder.token_dim,
        bias_hidden: cfg.prompt.bias_hidden,
        seed: cfg.seed + PROMPT_SEED_OFFSET,
    })?;
    let (trained, trace) = train_prompt_learner(
        state,
        encoder.encoder(),
        &samples,
        &PromptTrainConfig {
            epochs: cfg.prompt.epochs,
            learning_rate: cfg.prompt.learning_rate,
            batch_size: cfg.prompt.batch_size,
            seed: cfg.seed + PROMPT_SEED_OFFSET,
        },
        |_, _| Ok(()),
    )?;
    trained.save(&cfg.out_dir.join(artifact::PROMPT_CKPT))?;

    let mut csv = String::from("epoch,mean_loss\n");
    for row in &trace {
        csv.push_str(&format!("{},{}\n", row.epoch, row.mean_loss));
    }
    std::fs::write(cfg.out_dir.join(artifact::PROMPT_LOSS), csv)?;
    Ok(vec![artifact::PROMPT_CKPT.into(), artifact::PROMPT_LOSS.into()])
}

fn run_train_head(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let data = load_dataset(&cfg.out_dir)?;
    let world = load_world(&cfg.out_dir)?;
    let mode = cfg.feature_mode()?;
    let mode_data = load_mode_data(cfg, mode)?;
    let encoder = open_encoder(cfg)?;
    let ctx = feature_context(cfg, &encoder, &data.objects, mode, &mode_data);

    let sample_cfg = SampleConfig {
        n_predicates: data.predicates.len(),
        no_relation_ratio: cfg.head.no_relation_ratio,
        seed: cfg.seed + NEGATIVES_SEED_OFFSET,
    };
    let train = ctx.head_samples(&world, &owned(&scenes_in(&data.scenes, &data.split.train)), &sample_cfg)?;
    let val = ctx.head_samples(&world, &owned(&scenes_in(&data.scenes, &data.split.val)), &sample_cfg)?;

    let state = init_head(HeadConfig {
        embed_dim: cfg.encoder.embed_dim,
        hidden_dim: cfg.head.hidden_dim,
        pred_dim: cfg.head.pred_dim,
        loc_hidden: cfg.head.loc_hidden,
        loc_dim: cfg.head.loc_dim,
        n_predicates: data.predicates.len(),
        seed: cfg.seed + HEAD_SEED_OFFSET,
    })?;
    let (trained, trace) = train_head(
        state,
        &train,
        &val,
        &HeadTrainConfig {
            epochs: cfg.head.epochs,
            batch_size: cfg.head.batch_size,
            momentum: cfg.head.momentum,
            seed: cfg.seed + HEAD_SEED_OFFSET,
        },
        |_, _| Ok(()),
    )?;
    trained.save(&cfg.out_dir.join(artifact::HEAD_CKPT))?;

    let mut csv = String::from("epoch,lr,train_loss,val_loss\n");
    for row in &trace {
        let val_loss = row.val_loss.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{val_loss}\n",
            row.epoch, row.lr, row.train_loss
        ));
    }
    std::fs::write(cfg.out_dir.join(artifact::HEAD_TRACE), csv)?;
    Ok(vec![artifact::HEAD_CKPT.into(), artifact::HEAD_TRACE.into()])
}

fn run_calibrate(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let data = load_dataset(&cfg.out_dir)?;
    let world = load_world(&cfg.out_dir)?;
    let mode = cfg.feature_mode()?;
    let mode_data = load_mode_data(cfg, mode)?;
    let encoder = open_encoder(cfg)?;
    let ctx = feature_context(cfg, &encoder, &data.objects, mode, &mode_data);
    let head_path = require_file(&cfg.out_dir, artifact::HEAD_CKPT, "train-head")?;
    let state = PredicateHeadState::load(&head_path)?;

    // Annotated relations only: betas condition on real predicate classes.
    let sample_cfg = SampleConfig {
        n_predicates: data.predicates.len(),
        no_relation_ratio: 0.0,
        seed: 0,
    };
    let val = ctx.head_samples(&world, &owned(&scenes_in(&data.scenes, &data.split.val)), &sample_cfg)?;
    let mut observations = Vec::with_capacity(val.len());
    for sample in &val {
        observations.push((classify_sample(&state, sample)?, sample.label));
    }
    let table = estimate_frequencies(&observations)?;

    let file = CalibrationFile {
        betas: table
            .betas
            .iter()
            .enumerate()
            .map(|(k, &beta)| NamedBeta {
                predicate: data.predicates.name(k).unwrap_or("?").to_string(),
                beta,
            })
            .collect(),
        floored: table
            .floored
            .iter()
            .map(|&k| data.predicates.name(k).unwrap_or("?").to_string())
            .collect(),
        provenance: CalibrationProvenance {
            split: "val".into(),
            head_checkpoint: hash_file(&head_path)?,
            config_hash: hash_value(&stage_config(cfg, Stage::Calibrate)),
        },
    };
    save_json(&cfg.out_dir, artifact::CALIBRATION, &file)?;
    Ok(vec![artifact::CALIBRATION.into()])
}

fn load_calibration(
    out_dir: &Path,
    predicates: &Vocabulary,
) -> Result<CalibrationTable> {
    let file: CalibrationFile = load_json(out_dir, artifact::CALIBRATION, "calibrate")?;
    if file.betas.len() != predicates.len() {
        return Err(CliError::Core(crepe_core::Error::InvalidArgument(format!(
            "calibration file has {} betas for {} predicates",
            file.betas.len(),
            predicates.len()
        ))));
    }
    let mut betas = vec![0.0; predicates.len()];
    let mut floored = Vec::new();
    for named in &file.betas {
        let k = predicates.id(&named.predicate).ok_or_else(|| {
            crepe_core::Error::InvalidArgument(format!(
                "calibration names unknown predicate {:?}",
                named.predicate
            ))
        })?;
        betas[k] = named.beta;
        if file.floored.contains(&named.predicate) {
            floored.push(k);
        }
    }
    let table = CalibrationTable { betas, floored };
    table.validate()?;
    Ok(table)
}

/// Dumps per-scene predictions as JSON lines, then parses the dump back and
/// computes the report from it, so the artifact is the actual metric input.
fn write_eval_outputs(
    out_dir: &Path,
    paths: [&str; 4],
    scenes: &[&Scene],
    predictions: &[Vec<PairPrediction>],
    train_counts: &[usize],
    predicates: &Vocabulary,
) -> Result<Vec<String>> {
    let [pred_path, report_path, mr_path, per_pred_path] = paths;
    let full = out_dir.join(pred_path);
    if let Some(parent) = full.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut dump = std::io::BufWriter::new(std::fs::File::create(&full)?);
    for (scene, pairs) in scenes.iter().zip(predictions) {
        let line = PredictionLine {
            image_id: scene.image_id.clone(),
            pairs: pairs
                .iter()
                .map(|p| {
                    let mut ranked: Vec<(usize, f64)> = p.scores[..p.scores.len() - 1]
                        .iter()
                        .copied()
                        .enumerate()
                        .collect();
                    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    PairLine {
                        s: p.subject_idx,
                        o: p.object_idx,
                        top: ranked
                            .into_iter()
                            .map(|(k, v)| {
                                (predicates.name(k).unwrap_or("?").to_string(), v)
                            })
                            .collect(),
                    }
                })
                .collect(),
        };
        serde_json::to_writer(&mut dump, &line)?;
        dump.write_all(b"\n")?;
    }
    dump.flush()?;
    drop(dump);

    let by_id: BTreeMap<&str, &Scene> = scenes
        .iter()
        .map(|s| (s.image_id.as_str(), *s))
        .collect();
    let mut scored = Vec::new();
    for line in std::fs::read_to_string(&full)?.lines() {
        let parsed: PredictionLine = serde_json::from_str(line)?;
        let scene = by_id.get(parsed.image_id.as_str()).ok_or_else(|| {
            crepe_core::Error::InvalidArgument(format!(
                "prediction dump references unknown scene {}",
                parsed.image_id
            ))
        })?;
        let pairs: Vec<PairPrediction> = parsed
            .pairs
            .iter()
            .map(|p| {
                let mut scores = vec![0.0; predicates.len() + 1];
                for (name, value) in &p.top {
                    let k = predicates.id(name).ok_or_else(|| {
                        crepe_core::Error::InvalidArgument(format!(
                            "prediction dump names unknown predicate {name:?}"
                        ))
                    })?;
                    scores[k] = *value;
                }
                Ok(PairPrediction {
                    subject_idx: p.s,
                    object_idx: p.o,
                    scores,
                })
            })
            .collect::<Result<_>>()?;
        scored.push(ScenePredictions {
            ranked: rank_scene(&pairs),
            gt: gt_triplets(scene),
        });
    }

    let report = evaluate(&scored, train_counts);
    save_json(out_dir, report_path, &report)?;
    std::fs::write(out_dir.join(mr_path), mean_recall_csv(&report))?;
    std::fs::write(
        out_dir.join(per_pred_path),
        per_predicate_csv(&report, predicates),
    )?;
    Ok(vec![
        pred_path.into(),
        report_path.into(),
        mr_path.into(),
        per_pred_path.into(),
    ])
}

fn train_predicate_counts(data: &LoadedDataset) -> Vec<usize> {
    let mut counts = vec![0usize; data.predicates.len()];
    for scene in scenes_in(&data.scenes, &data.split.train) {
        for r in &scene.relations {
            counts[r.predicate_id] += 1;
        }
    }
    counts
}

fn run_evaluate(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let data = load_dataset(&cfg.out_dir)?;
    let world = load_world(&cfg.out_dir)?;
    let mode = cfg.feature_mode()?;
    let mode_data = load_mode_data(cfg, mode)?;
    let encoder = open_encoder(cfg)?;
    let ctx = feature_context(cfg, &encoder, &data.objects, mode, &mode_data);
    let state = PredicateHeadState::load(&require_file(
        &cfg.out_dir,
        artifact::HEAD_CKPT,
        "train-head",
    )?)?;
    let table = load_calibration(&cfg.out_dir, &data.predicates)?;

    let test = scenes_in(&data.scenes, &data.split.test);
    let mut predictions = Vec::with_capacity(test.len());
    for scene in &test {
        let features = ctx.scene_features(&world, scene)?;
        predictions.push(predict_scene(&state, scene, &features, Some(&table))?);
    }
    write_eval_outputs(
        &cfg.out_dir,
        [
            artifact::PREDICTIONS,
            artifact::REPORT,
            artifact::MEAN_RECALL_CSV,
            artifact::PER_PREDICATE_CSV,
        ],
        &test,
        &predictions,
        &train_predicate_counts(&data),
        &data.predicates,
    )
}

fn run_baseline(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let data = load_dataset(&cfg.out_dir)?;
    let train = owned(&scenes_in(&data.scenes, &data.split.train));
    let baseline = FreqBaseline::fit(&train, data.predicates.len())?;
    let test = scenes_in(&data.scenes, &data.split.test);
    let predictions: Vec<Vec<PairPrediction>> =
        test.iter().map(|s| baseline.predict_scene(s)).collect();
    write_eval_outputs(
        &cfg.out_dir,
        [
            artifact::BASELINE_PREDICTIONS,
            artifact::BASELINE_REPORT,
            artifact::BASELINE_MEAN_RECALL_CSV,
            artifact::BASELINE_PER_PREDICATE_CSV,
        ],
        &test,
        &predictions,
        &train_predicate_counts(&data),
        &data.predicates,
    )
}

/// Reads an evaluation report artifact, for tests and tooling.
pub fn load_report(out_dir: &Path, rel: &str) -> Result<EvalReport> {
    load_json(out_dir, rel, "evaluate")
}
