//! Frequency baseline: predicts predicates from label-pair statistics
//! alone, ignoring the image entirely. Strong on head predicates, blind to
//! everything the annotations never paired.

use std::collections::BTreeMap;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::head::PairPrediction;

/// Predicate distributions conditioned on (subject label, object label),
/// estimated by counting training relations.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqBaseline {
    n_predicates: usize,
    /// (subject label id, object label id) -> normalized predicate counts.
    pair_dist: BTreeMap<(usize, usize), Vec<f64>>,
    /// Marginal predicate distribution, the fallback for unseen pairs.
    marginal: Vec<f64>,
}

impl FreqBaseline {
    /// Counts predicate occurrences per label pair over the given scenes.
    /// Pairs without a single observation fall back to the marginal; with
    /// no relations at all the marginal is uniform.
    pub fn fit(scenes: &[Scene], n_predicates: usize) -> Result<Self> {
        if n_predicates == 0 {
            return Err(Error::InvalidArgument(
                "frequency baseline needs at least one predicate class".into(),
            ));
        }
        let mut pair_counts: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut marginal = vec![0.0; n_predicates];
        for scene in scenes {
            for rel in &scene.relations {
                if rel.predicate_id >= n_predicates {
                    return Err(Error::InvalidArgument(format!(
                        "scene {}: predicate id {} out of range for {} classes",
                        scene.image_id, rel.predicate_id, n_predicates
                    )));
                }
                let s_label = scene.entities[rel.subject_idx].label_id;
                let o_label = scene.entities[rel.object_idx].label_id;
                pair_counts
                    .entry((s_label, o_label))
                    .or_insert_with(|| vec![0.0; n_predicates])[rel.predicate_id] += 1.0;
                marginal[rel.predicate_id] += 1.0;
            }
        }
        let normalize = |mut v: Vec<f64>| {
            let total: f64 = v.iter().sum();
            if total > 0.0 {
                for x in &mut v {
                    *x /= total;
                }
            } else {
                v = vec![1.0 / n_predicates as f64; n_predicates];
            }
            v
        };
        let pair_dist = pair_counts
            .into_iter()
            .map(|(k, v)| (k, normalize(v)))
            .collect();
        Ok(FreqBaseline {
            n_predicates,
            pair_dist,
            marginal: normalize(marginal),
        })
    }

    pub fn n_predicates(&self) -> usize {
        self.n_predicates
    }

    /// Predicate distribution for a label pair, marginal when unseen. The
    /// trailing no-relation slot is always zero so rankings compare pairs
    /// purely by predicate evidence.
    pub fn predict(&self, subject_label: usize, object_label: usize) -> Vec<f64> {
        let dist = self
            .pair_dist
            .get(&(subject_label, object_label))
            .unwrap_or(&self.marginal);
        let mut scores = dist.clone();
        scores.push(0.0);
        scores
    }

    /// Scores every candidate pair of a scene.
    pub fn predict_scene(&self, scene: &Scene) -> Vec<PairPrediction> {
        scene
            .candidate_pairs()
            .into_iter()
            .map(|(s, o)| PairPrediction {
                subject_idx: s,
                object_idx: o,
                scores: self.predict(
                    scene.entities[s].label_id,
                    scene.entities[o].label_id,
                ),
            })
            .collect()
    }
}
