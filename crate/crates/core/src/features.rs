//! Feature assembly: turns annotated scenes plus an encoder into the
//! subject/object/union/location tuples consumed by the predicate head and
//! the prompt learner. The union-feature source is the ablation axis.

use std::collections::BTreeMap;

use crate::data::synthetic::SyntheticWorld;
use crate::data::{Scene, TripletVocabulary, Vocabulary};
use crate::embed::{
    retrieve_pseudo_labels, CachedEncoder, EmbeddingVector, LatentView, RegionSource,
};
use crate::error::{Error, Result};
use crate::geometry::{location_feature, union_box};
use crate::head::{sample_no_relation_pairs, HeadSample, PairFeatures, UnionFeature};
use crate::prompt::{union_text_embedding, PromptLearnerState, PromptSample};

/// Where the union feature (and with it the entity features) comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Union and entities are image-region embeddings.
    Visual,
    /// Union stays visual; entities switch to label-text embeddings.
    VisualLanguage,
    /// Union is the top-k retrieved triplet texts (attention-pooled by the
    /// head); entities are label text.
    PseudoLabels { k: usize },
    /// Union is the learned-prompt text embedding; entities are label text.
    LearnedPrompt,
}

impl FeatureMode {
    /// Parses the mode name used by configs and the command line. `k` is
    /// only consulted for `pseudo-k`.
    pub fn from_parts(name: &str, k: usize) -> Result<FeatureMode> {
        match name {
            "visual" => Ok(FeatureMode::Visual),
            "visual-language" => Ok(FeatureMode::VisualLanguage),
            "pseudo-k" => {
                if k == 0 {
                    return Err(Error::InvalidArgument(
                        "pseudo-k mode needs k >= 1".into(),
                    ));
                }
                Ok(FeatureMode::PseudoLabels { k })
            }
            "crepe" => Ok(FeatureMode::LearnedPrompt),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature mode {other:?}; expected visual, visual-language, pseudo-k or crepe"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMode::Visual => "visual",
            FeatureMode::VisualLanguage => "visual-language",
            FeatureMode::PseudoLabels { .. } => "pseudo-k",
            FeatureMode::LearnedPrompt => "crepe",
        }
    }

    /// True when entity features are label-text embeddings.
    fn text_entities(&self) -> bool {
        !matches!(self, FeatureMode::Visual)
    }
}

/// Resolves an image id to the pixel or latent content of its regions.
pub trait RegionLookup {
    fn source(&self, image_id: &str) -> Option<RegionSource<'_>>;
}

impl RegionLookup for SyntheticWorld {
    fn source(&self, image_id: &str) -> Option<RegionSource<'_>> {
        self.scenes
            .get_key_value(image_id)
            .map(|(id, regions)| {
                RegionSource::Latent(LatentView {
                    scene_id: id,
                    regions,
                    union_alignment: self.union_alignment,
                    entity_alignment: self.entity_alignment,
                })
            })
    }
}

/// Everything feature assembly needs besides the scenes themselves.
pub struct FeatureContext<'a> {
    pub encoder: &'a CachedEncoder,
    pub objects: &'a Vocabulary,
    pub mode: FeatureMode,
    /// Triplet texts with cached embeddings; required by the pseudo-label
    /// mode and by prompt-sample assembly.
    pub triplets: Option<&'a TripletVocabulary>,
    /// Trained prompt learner; required by the learned-prompt mode.
    pub prompts: Option<&'a PromptLearnerState>,
    /// Multiplier applied to every embedding fed to the head. Location
    /// features are never scaled. Unit-norm encoder outputs train slowly
    /// under the fixed head learning-rate schedule; a uniform rescaling of
    /// s, o and u preserves the translational structure while restoring
    /// usable gradient magnitudes.
    pub feature_scale: f64,
}

/// Controls [`FeatureContext::head_samples`].
#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    /// Number of real predicate classes; sampled negative pairs get the
    /// trailing no-relation label `n_predicates`.
    pub n_predicates: usize,
    /// No-relation pairs per annotated relation (ceiling); 0 disables
    /// negative sampling.
    pub no_relation_ratio: f64,
    pub seed: u64,
}

/// FNV-1a over the image id, folded with the base seed, so per-scene
/// sampling does not depend on scene order or subsetting.
fn scene_seed(base: u64, image_id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base.wrapping_mul(0x0100_0000_01b3);
    for b in image_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<'a> FeatureContext<'a> {
    fn scale(&self, v: Vec<f64>) -> Vec<f64> {
        if self.feature_scale == 1.0 {
            v
        } else {
            v.into_iter().map(|x| self.feature_scale * x).collect()
        }
    }

    fn label_name(&self, scene: &Scene, entity_idx: usize) -> Result<&'a str> {
        let label_id = scene.entities[entity_idx].label_id;
        self.objects.name(label_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "scene {}: entity {entity_idx} has label id {label_id} outside the object vocabulary",
                scene.image_id
            ))
        })
    }

    fn entity_feature(
        &self,
        scene: &Scene,
        source: &RegionSource<'_>,
        entity_idx: usize,
    ) -> Result<Vec<f64>> {
        let emb = if self.mode.text_entities() {
            self.encoder.text(self.label_name(scene, entity_idx)?)?
        } else {
            self.encoder.region(
                &scene.image_id,
                source,
                &scene.entities[entity_idx].bbox,
            )?
        };
        Ok(self.scale(emb.to_f64()))
    }

    /// Image embedding of the pair's union box. Needed by every mode: it is
    /// the feature itself for the visual modes and the retrieval query /
    /// prompt conditioning for the text modes.
    pub fn union_image(
        &self,
        scene: &Scene,
        source: &RegionSource<'_>,
        subject_idx: usize,
        object_idx: usize,
    ) -> Result<EmbeddingVector> {
        let ubox = union_box(
            &scene.entities[subject_idx].bbox,
            &scene.entities[object_idx].bbox,
        )?;
        self.encoder.region(&scene.image_id, source, &ubox)
    }

    fn triplets(&self) -> Result<&'a TripletVocabulary> {
        self.triplets.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} mode needs a triplet vocabulary with cached text embeddings",
                self.mode.name()
            ))
        })
    }

    fn union_feature(
        &self,
        scene: &Scene,
        source: &RegionSource<'_>,
        subject_idx: usize,
        object_idx: usize,
    ) -> Result<UnionFeature> {
        let u_img = self.union_image(scene, source, subject_idx, object_idx)?;
        match self.mode {
            FeatureMode::Visual | FeatureMode::VisualLanguage => {
                Ok(UnionFeature::Single(self.scale(u_img.to_f64())))
            }
            FeatureMode::PseudoLabels { k } => {
                let vocab = self.triplets()?;
                let retrieved = retrieve_pseudo_labels(&u_img, vocab, k)?;
                let embeddings = vocab.embeddings.as_ref().expect("checked by retrieval");
                Ok(UnionFeature::Candidates(
                    retrieved
                        .iter()
                        .map(|r| self.scale(embeddings[r.index].to_f64()))
                        .collect(),
                ))
            }
            FeatureMode::LearnedPrompt => {
                let prompts = self.prompts.ok_or_else(|| {
                    Error::InvalidArgument(
                        "crepe mode needs a trained prompt learner".into(),
                    )
                })?;
                let u_txt = union_text_embedding(
                    prompts,
                    self.encoder.encoder(),
                    self.label_name(scene, subject_idx)?,
                    self.label_name(scene, object_idx)?,
                    &u_img,
                )?;
                Ok(UnionFeature::Single(self.scale(u_txt.to_f64())))
            }
        }
    }

    /// Head-ready features of one entity pair.
    pub fn pair_features(
        &self,
        scene: &Scene,
        source: &RegionSource<'_>,
        subject_idx: usize,
        object_idx: usize,
    ) -> Result<PairFeatures> {
        let loc = location_feature(
            &scene.entities[subject_idx].bbox,
            &scene.entities[object_idx].bbox,
            scene.width,
            scene.height,
        )?
        .concat();
        Ok(PairFeatures {
            s: self.entity_feature(scene, source, subject_idx)?,
            o: self.entity_feature(scene, source, object_idx)?,
            union: self.union_feature(scene, source, subject_idx, object_idx)?,
            loc,
        })
    }

    fn resolve<'b>(
        &self,
        lookup: &'b dyn RegionLookup,
        scene: &Scene,
    ) -> Result<RegionSource<'b>> {
        lookup.source(&scene.image_id).ok_or_else(|| {
            Error::MissingEmbedding(format!(
                "no image content for scene {}",
                scene.image_id
            ))
        })
    }

    /// Features for every candidate pair of the scene, keyed the way
    /// [`crate::head::predict_scene`] expects.
    pub fn scene_features(
        &self,
        lookup: &dyn RegionLookup,
        scene: &Scene,
    ) -> Result<BTreeMap<(usize, usize), PairFeatures>> {
        let source = self.resolve(lookup, scene)?;
        let mut out = BTreeMap::new();
        for (si, oi) in scene.candidate_pairs() {
            out.insert((si, oi), self.pair_features(scene, &source, si, oi)?);
        }
        Ok(out)
    }

    /// Labeled training tuples for the head: one per annotated relation,
    /// plus sampled no-relation pairs labeled with the trailing class.
    pub fn head_samples(
        &self,
        lookup: &dyn RegionLookup,
        scenes: &[Scene],
        cfg: &SampleConfig,
    ) -> Result<Vec<HeadSample>> {
        let mut out = Vec::new();
        for scene in scenes {
            let source = self.resolve(lookup, scene)?;
            let mut emit = |si: usize, oi: usize, label: usize| -> Result<()> {
                let f = self.pair_features(scene, &source, si, oi)?;
                out.push(HeadSample {
                    id: format!("{}:({si},{oi})", scene.image_id),
                    s: f.s,
                    o: f.o,
                    union: f.union,
                    loc: f.loc,
                    label,
                });
                Ok(())
            };
            for r in &scene.relations {
                emit(r.subject_idx, r.object_idx, r.predicate_id)?;
            }
            if cfg.no_relation_ratio > 0.0 && !scene.relations.is_empty() {
                let negatives = sample_no_relation_pairs(
                    scene,
                    cfg.no_relation_ratio,
                    scene_seed(cfg.seed, &scene.image_id),
                )?;
                for (si, oi) in negatives {
                    emit(si, oi, cfg.n_predicates)?;
                }
            }
        }
        Ok(out)
    }

    /// Contrastive training examples for the prompt learner: each relation's
    /// union image embedding paired with its k=1 pseudo-label text. Ignores
    /// the configured mode.
    pub fn prompt_samples(
        &self,
        lookup: &dyn RegionLookup,
        scenes: &[Scene],
    ) -> Result<Vec<PromptSample>> {
        let vocab = self.triplets()?;
        let embeddings = vocab.embeddings.as_ref().ok_or_else(|| {
            Error::MissingEmbedding("triplet vocabulary has no cached text embeddings".into())
        })?;
        let mut out = Vec::new();
        for scene in scenes {
            let source = self.resolve(lookup, scene)?;
            for r in &scene.relations {
                let u_img = self.union_image(scene, &source, r.subject_idx, r.object_idx)?;
                let top = retrieve_pseudo_labels(&u_img, vocab, 1)?;
                out.push(PromptSample {
                    id: format!("{}:({},{})", scene.image_id, r.subject_idx, r.object_idx),
                    subject: self.label_name(scene, r.subject_idx)?.to_string(),
                    object: self.label_name(scene, r.object_idx)?.to_string(),
                    u_img,
                    pseudo_txt: embeddings[top[0].index].clone(),
                });
            }
        }
        Ok(out)
    }
}
