//! Post-hoc frequency calibration of predicate probabilities.
//!
//! A head trained on a long-tailed predicate distribution inflates the
//! probability of frequent classes. The correction estimates, per predicate
//! class `k`, the mean probability `beta_k` the model assigns to `k` on
//! validation examples whose ground truth is `k`, then divides each class
//! probability by its `beta_k` at inference. The divided values are ranking
//! scores, deliberately not renormalized: recall metrics only consume the
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::PredicateDistribution;

/// Substitute for `beta_k` when a class has no validation examples; keeps
/// the division finite without handing the class an implausible boost.
pub const BETA_FLOOR: f64 = 1e-4;

/// Per-predicate frequency estimates. The no-relation class is not
/// calibrated; `adjust` passes its probability through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    /// One estimate per predicate class, no-relation excluded.
    pub betas: Vec<f64>,
    /// Classes that had zero validation examples and fell back to
    /// [`BETA_FLOOR`].
    pub floored: Vec<usize>,
}

impl CalibrationTable {
    pub fn n_predicates(&self) -> usize {
        self.betas.len()
    }

    /// A table of all-ones: adjustment becomes the identity.
    pub fn identity(n_predicates: usize) -> Self {
        CalibrationTable {
            betas: vec![1.0; n_predicates],
            floored: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::InvalidArgument(
                "calibration estimates must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Estimates `beta_k` from validation predictions paired with their
/// ground-truth predicate ids. Every distribution must carry the same class
/// count; ground truth never carries the no-relation id.
pub fn estimate_frequencies(
    predictions: &[(PredicateDistribution, usize)],
) -> Result<CalibrationTable> {
    let Some((first, _)) = predictions.first() else {
        return Err(Error::InvalidArgument(
            "cannot calibrate without validation predictions".into(),
        ));
    };
    let n_predicates = first.n_predicates();
    let mut sums = vec![0.0f64; n_predicates];
    let mut counts = vec![0usize; n_predicates];
    for (dist, label) in predictions {
        if dist.n_predicates() != n_predicates {
            return Err(Error::InvalidArgument(format!(
                "mixed class counts in calibration input: {} and {}",
                dist.n_predicates(),
                n_predicates
            )));
        }
        if *label >= n_predicates {
            return Err(Error::InvalidArgument(format!(
                "calibration ground truth {label} out of range for {n_predicates} predicates"
            )));
        }
        sums[*label] += dist.probs[*label];
        counts[*label] += 1;
    }
    let mut betas = Vec::with_capacity(n_predicates);
    let mut floored = Vec::new();
    for k in 0..n_predicates {
        if counts[k] == 0 {
            log::warn!(
                "predicate class {k} has no validation examples; calibration uses the floor {BETA_FLOOR}"
            );
            floored.push(k);
            betas.push(BETA_FLOOR);
        } else {
            betas.push((sums[k] / counts[k] as f64).max(BETA_FLOOR));
        }
    }
    let table = CalibrationTable { betas, floored };
    table.validate()?;
    Ok(table)
}

/// Divides each predicate probability by its estimate. The output is an
/// unnormalized score vector with the no-relation entry passed through.
pub fn adjust(dist: &PredicateDistribution, table: &CalibrationTable) -> Result<Vec<f64>> {
    if dist.n_predicates() != table.n_predicates() {
        return Err(Error::InvalidArgument(format!(
            "distribution over {} predicates, table over {}",
            dist.n_predicates(),
            table.n_predicates()
        )));
    }
    table.validate()?;
    let mut scores = Vec::with_capacity(dist.probs.len());
    for (k, &p) in dist.probs.iter().enumerate() {
        if k < table.betas.len() {
            scores.push(p / table.betas[k]);
        } else {
            scores.push(p);
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn dist(probs: Vec<f64>) -> PredicateDistribution {
        PredicateDistribution { probs }
    }

    fn argmax(scores: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in scores.iter().enumerate() {
            if *v > scores[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn constant_uniform_predictor_estimates_one_over_c() {
        // 3 predicates + no-relation: uniform probability is 1/4.
        let u = dist(vec![0.25; 4]);
        let preds = vec![(u.clone(), 0), (u.clone(), 1), (u.clone(), 2), (u, 1)];
        let table = estimate_frequencies(&preds).unwrap();
        assert_eq!(table.betas, vec![0.25; 3]);
        assert!(table.floored.is_empty());
    }

    #[test]
    fn hand_averaged_estimates() {
        let preds = vec![
            (dist(vec![0.8, 0.1, 0.1]), 0),
            (dist(vec![0.6, 0.3, 0.1]), 0),
            (dist(vec![0.4, 0.5, 0.1]), 1),
        ];
        let table = estimate_frequencies(&preds).unwrap();
        assert!((table.betas[0] - 0.7).abs() < 1e-12);
        assert!((table.betas[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictor_estimates_one() {
        let preds = vec![
            (dist(vec![1.0, 0.0, 0.0]), 0),
            (dist(vec![0.0, 1.0, 0.0]), 1),
        ];
        let table = estimate_frequencies(&preds).unwrap();
        assert_eq!(table.betas, vec![1.0, 1.0]);
    }

    #[test]
    fn unseen_class_falls_back_to_floor() {
        let preds = vec![(dist(vec![0.9, 0.05, 0.05]), 0)];
        let table = estimate_frequencies(&preds).unwrap();
        assert_eq!(table.betas[0], 0.9);
        assert_eq!(table.betas[1], BETA_FLOOR);
        assert_eq!(table.floored, vec![1]);
    }

    #[test]
    fn estimate_rejects_bad_input() {
        assert!(estimate_frequencies(&[]).is_err());
        let mixed = vec![
            (dist(vec![0.5, 0.5]), 0),
            (dist(vec![0.3, 0.3, 0.4]), 0),
        ];
        assert!(estimate_frequencies(&mixed).is_err());
        let no_rel_gt = vec![(dist(vec![0.5, 0.5, 0.0]), 2)];
        assert!(estimate_frequencies(&no_rel_gt).is_err());
    }

    #[test]
    fn estimate_is_invariant_to_input_permutation() {
        let mut preds = vec![
            (dist(vec![0.7, 0.2, 0.1]), 0),
            (dist(vec![0.2, 0.6, 0.2]), 1),
            (dist(vec![0.5, 0.4, 0.1]), 0),
            (dist(vec![0.1, 0.8, 0.1]), 1),
        ];
        let forward = estimate_frequencies(&preds).unwrap();
        preds.reverse();
        assert_eq!(estimate_frequencies(&preds).unwrap(), forward);
    }

    #[test]
    fn hand_adjustment_flips_argmax() {
        let d = dist(vec![0.5, 0.5, 0.0]);
        let table = CalibrationTable {
            betas: vec![0.5, 0.25],
            floored: vec![],
        };
        let scores = adjust(&d, &table).unwrap();
        assert_eq!(scores, vec![1.0, 2.0, 0.0]);
        assert_eq!(argmax(&scores[..2]), 1);
    }

    #[test]
    fn identity_table_is_a_no_op() {
        let d = dist(vec![0.2, 0.3, 0.4, 0.1]);
        let scores = adjust(&d, &CalibrationTable::identity(3)).unwrap();
        assert_eq!(scores, d.probs);
    }

    #[test]
    fn uniform_estimates_preserve_argmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let table = CalibrationTable {
            betas: vec![0.37; 6],
            floored: vec![],
        };
        for _ in 0..200 {
            let mut probs: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= total;
            }
            let d = dist(probs);
            let scores = adjust(&d, &table).unwrap();
            assert_eq!(argmax(&scores[..6]), argmax(&d.probs[..6]));
            assert!(scores.iter().all(|s| *s >= 0.0 && s.is_finite()));
        }
    }

    #[test]
    fn equal_estimates_preserve_pairwise_order() {
        let d = dist(vec![0.1, 0.4, 0.2, 0.3]);
        let table = CalibrationTable {
            betas: vec![0.9, 0.3, 0.3],
            floored: vec![],
        };
        let scores = adjust(&d, &table).unwrap();
        // Classes 1 and 2 share an estimate, so their order is preserved.
        assert!(scores[1] > scores[2]);
    }

    #[test]
    fn adjustment_rejects_mismatched_table() {
        let d = dist(vec![0.5, 0.5, 0.0]);
        assert!(adjust(&d, &CalibrationTable::identity(5)).is_err());
    }

    #[test]
    fn no_relation_probability_passes_through() {
        let d = dist(vec![0.3, 0.3, 0.4]);
        let table = CalibrationTable {
            betas: vec![0.5, 0.1],
            floored: vec![],
        };
        let scores = adjust(&d, &table).unwrap();
        assert_eq!(scores[2], 0.4);
    }

    /// A predictor whose outputs are tilted toward the frequent class gets
    /// its rare-class recall back after adjustment.
    #[test]
    fn calibration_recovers_rare_class_recall() {
        // Class priors 0.8 / 0.1 / 0.1; the model multiplies a mild
        // true-class signal by the prior, so rare true classes still argmax
        // to class 0 before adjustment.
        let priors = [0.8, 0.1, 0.1];
        let biased = |true_class: usize| {
            let mut probs: Vec<f64> = priors
                .iter()
                .enumerate()
                .map(|(k, prior)| prior * if k == true_class { 0.5 } else { 0.25 })
                .collect();
            probs.push(0.0);
            let total: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= total;
            }
            dist(probs)
        };
        let val: Vec<(PredicateDistribution, usize)> = (0..30)
            .map(|i| {
                let c = if i < 24 { 0 } else if i < 27 { 1 } else { 2 };
                (biased(c), c)
            })
            .collect();
        let table = estimate_frequencies(&val).unwrap();

        let recall_at_1 = |calibrated: bool| {
            let mut hit = [0.0; 3];
            for c in 0..3 {
                let d = biased(c);
                let scores = if calibrated {
                    adjust(&d, &table).unwrap()
                } else {
                    d.probs.clone()
                };
                if argmax(&scores[..3]) == c {
                    hit[c] = 1.0;
                }
            }
            hit.iter().sum::<f64>() / 3.0
        };
        let before = recall_at_1(false);
        let after = recall_at_1(true);
        assert!(after >= before);
        assert!(after > 0.99, "calibrated recall {after}");
        assert!(before < 0.5, "bias fixture too weak: {before}");
    }
}
