//! End-to-end pipeline behavior: artifact chain, rerun no-ops, dependency
//! errors, config staleness, and cross-directory reproducibility.

use std::path::Path;

use crepe_cli::config::{
    DatasetConfig, EncoderConfig, HeadStageConfig, PipelineConfig, PromptStageConfig,
};
use crepe_cli::stages::{artifact, load_report};
use crepe_cli::{run_all, run_stage, CliError, Stage};

/// Small but non-trivial: enough scenes for three usable splits, few enough
/// epochs to stay fast.
fn test_config(out_dir: &Path) -> PipelineConfig {
    PipelineConfig {
        out_dir: out_dir.to_path_buf(),
        seed: 7,
        mode: "crepe".into(),
        pseudo_k: 2,
        dataset: DatasetConfig {
            n_scenes: 12,
            n_objects: 5,
            n_predicates: 3,
            entities_per_scene: [3, 4],
            relations_per_scene: [2, 3],
            ..DatasetConfig::default()
        },
        encoder: EncoderConfig {
            seed: 5,
            token_dim: 12,
            embed_dim: 16,
            hash_space: 512,
            cache_dir: None,
        },
        prompt: PromptStageConfig {
            epochs: 5,
            ..PromptStageConfig::default()
        },
        head: HeadStageConfig {
            hidden_dim: 16,
            pred_dim: 12,
            loc_hidden: 8,
            loc_dim: 4,
            epochs: 6,
            batch_size: 16,
            ..HeadStageConfig::default()
        },
    }
}

#[test]
fn full_pipeline_emits_the_report_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let outcomes = run_all(&cfg).unwrap();
    assert_eq!(outcomes.len(), 9);
    assert!(outcomes.iter().all(|o| !o.skipped));

    for rel in [
        artifact::SCENES,
        artifact::OBJECTS,
        artifact::PREDICATES,
        artifact::SPLIT,
        artifact::WORLD,
        artifact::PLANTED,
        artifact::TRIPLETS,
        artifact::TRIPLETS_EMBEDDED,
        artifact::PSEUDO_LABELS,
        artifact::PROMPT_CKPT,
        artifact::PROMPT_LOSS,
        artifact::HEAD_CKPT,
        artifact::HEAD_TRACE,
        artifact::CALIBRATION,
        artifact::PREDICTIONS,
        artifact::REPORT,
        artifact::MEAN_RECALL_CSV,
        artifact::PER_PREDICATE_CSV,
        artifact::BASELINE_REPORT,
    ] {
        assert!(dir.path().join(rel).exists(), "missing {rel}");
    }

    let report = load_report(dir.path(), artifact::REPORT).unwrap();
    assert_eq!(report.mean_recall.len(), 5);
    assert!(report.mean_recall.values().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(report.rows.len(), 3);

    // The prediction dump is JSONL with scene ids and ranked pairs.
    let dump = std::fs::read_to_string(dir.path().join(artifact::PREDICTIONS)).unwrap();
    let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    assert!(first["image_id"].is_string());
    assert!(first["pairs"][0]["top"][0][0].is_string());

    // The trace records the schedule's learning rate column.
    let trace = std::fs::read_to_string(dir.path().join(artifact::HEAD_TRACE)).unwrap();
    assert!(trace.starts_with("epoch,lr,train_loss,val_loss\n"));
    assert!(trace.lines().nth(1).unwrap().starts_with("1,0.001,"));
}

#[test]
fn rerun_with_unchanged_inputs_is_a_noop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    run_all(&cfg).unwrap();

    let before = std::fs::read(dir.path().join("manifests/evaluate.json")).unwrap();
    let outcomes = run_all(&cfg).unwrap();
    assert!(
        outcomes.iter().all(|o| o.skipped),
        "{:?}",
        outcomes
            .iter()
            .filter(|o| !o.skipped)
            .map(|o| o.stage)
            .collect::<Vec<_>>()
    );
    let after = std::fs::read(dir.path().join("manifests/evaluate.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn missing_dependency_names_the_file_and_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let err = run_stage(&cfg, Stage::Evaluate).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("dataset/scenes.json") && msg.contains("crepe ingest"),
        "{msg}"
    );

    run_stage(&cfg, Stage::Ingest).unwrap();
    let err = run_stage(&cfg, Stage::Evaluate).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(artifact::PROMPT_CKPT) || msg.contains(artifact::HEAD_CKPT), "{msg}");
}

#[test]
fn changed_config_is_refused_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    run_stage(&cfg, Stage::Ingest).unwrap();

    let mut changed = cfg.clone();
    changed.dataset.n_scenes = 13;
    let err = run_stage(&changed, Stage::Ingest).unwrap_err();
    assert!(matches!(err, CliError::StaleConfig { stage: "ingest", .. }), "{err}");
    assert!(err.to_string().contains("--out"), "{err}");

    // A mode change leaves ingestion untouched but refuses a stale head.
    run_all(&cfg).unwrap();
    let mut other_mode = cfg.clone();
    other_mode.mode = "visual".into();
    assert!(run_stage(&other_mode, Stage::Ingest).unwrap().skipped);
    let err = run_stage(&other_mode, Stage::TrainHead).unwrap_err();
    assert!(matches!(err, CliError::StaleConfig { stage: "train-head", .. }), "{err}");
}

#[test]
fn reruns_in_fresh_directories_are_bit_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_all(&test_config(dir_a.path())).unwrap();
    run_all(&test_config(dir_b.path())).unwrap();

    for rel in [
        artifact::PROMPT_CKPT,
        artifact::HEAD_CKPT,
        artifact::HEAD_TRACE,
        artifact::CALIBRATION,
        artifact::PREDICTIONS,
        artifact::REPORT,
        artifact::MEAN_RECALL_CSV,
        artifact::PER_PREDICATE_CSV,
        artifact::BASELINE_REPORT,
    ] {
        let a = std::fs::read(dir_a.path().join(rel)).unwrap();
        let b = std::fs::read(dir_b.path().join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

#[test]
fn visual_mode_skips_prompt_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = test_config(dir.path());
    cfg.mode = "visual".into();
    let outcomes = run_all(&cfg).unwrap();
    assert_eq!(outcomes.len(), 8);
    assert!(outcomes.iter().all(|o| o.stage != "train-prompts"));
    assert!(!dir.path().join(artifact::PROMPT_CKPT).exists());
    assert!(dir.path().join(artifact::REPORT).exists());
}
