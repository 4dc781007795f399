//! Run configuration: a TOML document merged with command-line overrides.
//! The resolved config is serialized into every stage manifest, so every
//! artifact records exactly what produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crepe_core::data::synthetic::SyntheticConfig;
use crepe_core::features::FeatureMode;

/// Environment variable that relocates the embedding cache, overriding
/// both the config and the default location under the output directory.
pub const CACHE_ENV_VAR: &str = "CREPE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Base seed; training stages derive theirs by fixed offsets (prompts
    /// +1, head +2, negative-pair sampling +3) so one flag reseeds a run.
    pub seed: u64,
    /// Union feature source: visual, visual-language, pseudo-k or crepe.
    pub mode: String,
    /// Retrieval depth for pseudo-label artifacts and the pseudo-k mode.
    pub pseudo_k: usize,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub prompt: PromptStageConfig,
    pub head: HeadStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("runs/default"),
            seed: 7,
            mode: "crepe".into(),
            pseudo_k: 1,
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            prompt: PromptStageConfig::default(),
            head: HeadStageConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic" generates scenes; "vg" reads `annotations`.
    pub source: String,
    /// Annotation JSON for the vg source.
    pub annotations: Option<PathBuf>,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Split shuffle seed for the vg source (the synthetic generator
    /// splits by scene order, which is already seeded).
    pub split_seed: u64,
    // Synthetic generator knobs; ignored by the vg source.
    pub n_scenes: usize,
    pub n_objects: usize,
    pub n_predicates: usize,
    /// Relative predicate frequencies; empty means uniform.
    pub skew: Vec<f64>,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub entities_per_scene: [usize; 2],
    pub relations_per_scene: [usize; 2],
    pub pair_affinity: f64,
    pub union_alignment: f64,
    pub entity_alignment: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        DatasetConfig {
            source: "synthetic".into(),
            annotations: None,
            train_frac: s.train_frac,
            val_frac: s.val_frac,
            split_seed: 0,
            n_scenes: s.n_scenes,
            n_objects: s.n_objects,
            n_predicates: s.n_predicates,
            skew: s.skew,
            latent_dim: s.embed_dim,
            noise_sigma: s.noise_sigma,
            entities_per_scene: [s.entities_per_scene.0, s.entities_per_scene.1],
            relations_per_scene: [s.relations_per_scene.0, s.relations_per_scene.1],
            pair_affinity: s.pair_affinity,
            union_alignment: s.union_alignment,
            entity_alignment: s.entity_alignment,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_scenes: self.n_scenes,
            n_objects: self.n_objects,
            n_predicates: self.n_predicates,
            skew: self.skew.clone(),
            seed,
            embed_dim: self.latent_dim,
            noise_sigma: self.noise_sigma,
            entities_per_scene: (self.entities_per_scene[0], self.entities_per_scene[1]),
            relations_per_scene: (self.relations_per_scene[0], self.relations_per_scene[1]),
            image_size: (256.0, 256.0),
            pair_affinity: self.pair_affinity,
            union_alignment: self.union_alignment,
            entity_alignment: self.entity_alignment,
            train_frac: self.train_frac,
            val_frac: self.val_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Identity of the frozen encoder weights.
    pub seed: u64,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub hash_space: u32,
    /// Embedding cache directory; defaults to `<out_dir>/cache`, and
    /// [`CACHE_ENV_VAR`] overrides both.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            seed: 17,
            token_dim: 16,
            embed_dim: 32,
            hash_space: 4096,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptStageConfig {
    pub context_tokens: usize,
    /// 0 means the embed-dim/16 default.
    pub bias_hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PromptStageConfig {
    fn default() -> Self {
        PromptStageConfig {
            context_tokens: 4,
            bias_hidden: 0,
            epochs: 500,
            learning_rate: 2e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadStageConfig {
    pub hidden_dim: usize,
    pub pred_dim: usize,
    pub loc_hidden: usize,
    pub loc_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// No-relation pairs sampled per annotated relation.
    pub no_relation_ratio: f64,
    /// Multiplier on every embedding fed to the head; location features
    /// are never scaled.
    pub feature_scale: f64,
}

impl Default for HeadStageConfig {
    fn default() -> Self {
        HeadStageConfig {
            hidden_dim: 512,
            pred_dim: 512,
            loc_hidden: 32,
            loc_dim: 16,
            epochs: 100,
            batch_size: 64,
            momentum: 0.9,
            no_relation_ratio: 1.0,
            feature_scale: 1.0,
        }
    }
}

/// Command-line overrides applied after the file is parsed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub k: Option<usize>,
}

impl PipelineConfig {
    pub fn feature_mode(&self) -> Result<FeatureMode> {
        Ok(FeatureMode::from_parts(&self.mode, self.pseudo_k)?)
    }

    /// Cache directory after applying the precedence env var > config >
    /// `<out_dir>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        if let Ok(dir) = std::env::var(CACHE_ENV_VAR) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.encoder
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let fail = |message: String| {
            Err(CliError::Config {
                path: origin.to_path_buf(),
                message,
            })
        };
        self.feature_mode().map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        // Every mode materializes the pseudo-label artifact, not just pseudo-k.
        if self.pseudo_k == 0 {
            return fail("pseudo_k must be at least 1".into());
        }
        match self.dataset.source.as_str() {
            "synthetic" => {
                let d = &self.dataset;
                if d.n_scenes == 0 || d.n_objects == 0 || d.n_predicates == 0 {
                    return fail("synthetic dataset needs scenes, objects and predicates".into());
                }
                if d.entities_per_scene[0] < 2 || d.entities_per_scene[0] > d.entities_per_scene[1]
                {
                    return fail(format!(
                        "entities_per_scene {:?} is not a valid range (min 2)",
                        d.entities_per_scene
                    ));
                }
                if d.relations_per_scene[0] == 0
                    || d.relations_per_scene[0] > d.relations_per_scene[1]
                {
                    return fail(format!(
                        "relations_per_scene {:?} is not a valid range (min 1)",
                        d.relations_per_scene
                    ));
                }
            }
            "vg" => {
                if self.dataset.annotations.is_none() {
                    return fail("vg source needs dataset.annotations".into());
                }
            }
            other => return fail(format!("unknown dataset source {other:?}")),
        }
        let d = &self.dataset;
        if !(d.train_frac > 0.0 && d.val_frac >= 0.0 && d.train_frac + d.val_frac < 1.0) {
            return fail(format!(
                "split fractions train={} val={} leave no test scenes",
                d.train_frac, d.val_frac
            ));
        }
        let e = &self.encoder;
        if e.token_dim == 0 || e.embed_dim == 0 || e.hash_space == 0 {
            return fail("encoder dimensions must be positive".into());
        }
        if self.prompt.context_tokens == 0
            || self.prompt.epochs == 0
            || self.prompt.batch_size == 0
            || !(self.prompt.learning_rate > 0.0)
        {
            return fail("prompt stage needs positive tokens, epochs, batch and rate".into());
        }
        let h = &self.head;
        if h.hidden_dim == 0 || h.pred_dim == 0 || h.loc_hidden == 0 || h.loc_dim == 0 {
            return fail("head dimensions must be positive".into());
        }
        if h.epochs == 0 || h.batch_size == 0 {
            return fail("head stage needs positive epochs and batch size".into());
        }
        if !(h.momentum >= 0.0 && h.momentum < 1.0) {
            return fail(format!("momentum {} outside [0, 1)", h.momentum));
        }
        if !(h.feature_scale > 0.0) || h.no_relation_ratio < 0.0 {
            return fail("feature_scale must be positive, no_relation_ratio non-negative".into());
        }
        Ok(())
    }
}

/// Parses the TOML file, applies overrides, validates, and resolves the
/// resulting config. Every stage runs against the value returned here.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    let content = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut cfg: PipelineConfig = toml::from_str(&content).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &overrides.mode {
        cfg.mode = mode.clone();
    }
    if let Some(k) = overrides.k {
        cfg.pseudo_k = k;
    }
    cfg.validate(path)?;
    Ok(cfg)
}
