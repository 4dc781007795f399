//! Mean recall at K and the per-predicate breakdown.
//!
//! Recall is computed per predicate class and averaged without frequency
//! weighting, so tail predicates count as much as head ones. Ranking is
//! graph constrained: every entity pair contributes exactly its top scoring
//! predicate, and pairs compete by that score. The no-relation class (the
//! trailing score entry) never enters the ranking.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::data::{Scene, Vocabulary};
use crate::head::PairPrediction;

/// Ks the standard report evaluates.
pub const REPORT_KS: [usize; 5] = [5, 10, 15, 20, 50];

/// K used for the per-predicate breakdown.
pub const BREAKDOWN_K: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject_idx: usize,
    pub object_idx: usize,
    pub predicate_id: usize,
    pub score: f64,
}

/// One scene's ranked predictions next to its ground truth, the unit the
/// metrics consume. Ground truth entries are (subject, object, predicate)
/// index triples; duplicates count as separate instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePredictions {
    pub ranked: Vec<RankedTriplet>,
    pub gt: Vec<(usize, usize, usize)>,
}

pub fn gt_triplets(scene: &Scene) -> Vec<(usize, usize, usize)> {
    scene
        .relations
        .iter()
        .map(|r| (r.subject_idx, r.object_idx, r.predicate_id))
        .collect()
}

/// Graph-constrained ranking: each pair is reduced to its highest scoring
/// predicate (ties to the lower predicate id, no-relation excluded), then
/// pairs are ordered by score descending with ties to the earlier pair.
pub fn rank_scene(pairs: &[PairPrediction]) -> Vec<RankedTriplet> {
    let mut out: Vec<RankedTriplet> = Vec::with_capacity(pairs.len());
    let mut order: Vec<usize> = Vec::with_capacity(pairs.len());
    for (pos, pair) in pairs.iter().enumerate() {
        let n_predicates = pair.scores.len().saturating_sub(1);
        if n_predicates == 0 {
            continue;
        }
        let mut best = 0;
        for k in 1..n_predicates {
            if pair.scores[k] > pair.scores[best] {
                best = k;
            }
        }
        order.push(pos);
        out.push(RankedTriplet {
            subject_idx: pair.subject_idx,
            object_idx: pair.object_idx,
            predicate_id: best,
            score: pair.scores[best],
        });
    }
    let mut idx: Vec<usize> = (0..out.len()).collect();
    idx.sort_by(|&a, &b| {
        out[b]
            .score
            .total_cmp(&out[a].score)
            .then(order[a].cmp(&order[b]))
            .then(out[a].predicate_id.cmp(&out[b].predicate_id))
    });
    idx.into_iter().map(|i| out[i].clone()).collect()
}

/// Per-predicate recall at K. `None` marks predicates without a ground
/// truth instance (recall undefined).
pub fn per_predicate_recall(
    scenes: &[ScenePredictions],
    n_predicates: usize,
    k: usize,
) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; n_predicates];
    let mut totals = vec![0usize; n_predicates];
    for scene in scenes {
        let top: BTreeSet<(usize, usize, usize)> = scene
            .ranked
            .iter()
            .take(k)
            .map(|t| (t.subject_idx, t.object_idx, t.predicate_id))
            .collect();
        for &(s, o, p) in &scene.gt {
            assert!(p < n_predicates, "ground-truth predicate out of range");
            totals[p] += 1;
            if top.contains(&(s, o, p)) {
                hits[p] += 1;
            }
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { None } else { Some(h as f64 / t as f64) })
        .collect()
}

/// Unweighted mean of per-predicate recall over predicates with at least
/// one ground-truth instance; 0 when there is no ground truth at all.
pub fn mean_recall_at_k(scenes: &[ScenePredictions], n_predicates: usize, k: usize) -> f64 {
    let recalls = per_predicate_recall(scenes, n_predicates, k);
    let present: Vec<f64> = recalls.into_iter().flatten().collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyGroup {
    Head,
    Mid,
    Tail,
}

/// Splits predicates into frequency terciles: sorted by descending training
/// count, the first ceil(n/3) are head, the last floor(n/3) are tail.
pub fn frequency_groups(train_counts: &[usize]) -> Vec<FrequencyGroup> {
    let n = train_counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let head_end = n.div_ceil(3);
    let tail_start = n - n / 3;
    let mut groups = vec![FrequencyGroup::Mid; n];
    for (rank, &pred) in order.iter().enumerate() {
        groups[pred] = if rank < head_end {
            FrequencyGroup::Head
        } else if rank >= tail_start {
            FrequencyGroup::Tail
        } else {
            FrequencyGroup::Mid
        };
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRow {
    pub predicate_id: usize,
    pub train_count: usize,
    pub group: FrequencyGroup,
    /// Recall at [`BREAKDOWN_K`]; `None` when the predicate has no ground
    /// truth in the evaluated split.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub head: Option<f64>,
    pub mid: Option<f64>,
    pub tail: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// K -> mean recall, for each K in [`REPORT_KS`].
    pub mean_recall: BTreeMap<usize, f64>,
    /// Per-predicate breakdown at [`BREAKDOWN_K`], descending train count.
    pub rows: Vec<PredicateRow>,
    pub group_means: GroupMeans,
}

/// Full evaluation: mR@K for the standard Ks plus the per-predicate and
/// head/mid/tail breakdown. `train_counts` has one entry per predicate and
/// fixes the class count.
pub fn evaluate(scenes: &[ScenePredictions], train_counts: &[usize]) -> EvalReport {
    let n_predicates = train_counts.len();
    let mean_recall = REPORT_KS
        .iter()
        .map(|&k| (k, mean_recall_at_k(scenes, n_predicates, k)))
        .collect();

    let recalls = per_predicate_recall(scenes, n_predicates, BREAKDOWN_K);
    let groups = frequency_groups(train_counts);
    let mut rows: Vec<PredicateRow> = (0..n_predicates)
        .map(|p| PredicateRow {
            predicate_id: p,
            train_count: train_counts[p],
            group: groups[p],
            recall: recalls[p],
        })
        .collect();
    rows.sort_by(|a, b| b.train_count.cmp(&a.train_count).then(a.predicate_id.cmp(&b.predicate_id)));

    let group_mean = |g: FrequencyGroup| {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.group == g)
            .filter_map(|r| r.recall)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let group_means = GroupMeans {
        head: group_mean(FrequencyGroup::Head),
        mid: group_mean(FrequencyGroup::Mid),
        tail: group_mean(FrequencyGroup::Tail),
    };
    EvalReport {
        mean_recall,
        rows,
        group_means,
    }
}

/// The mR@K table as CSV.
pub fn mean_recall_csv(report: &EvalReport) -> String {
    let mut out = String::from("k,mean_recall\n");
    for (k, v) in &report.mean_recall {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

/// Per-predicate recall/frequency table as CSV, one row per predicate in
/// descending training frequency.
pub fn per_predicate_csv(report: &EvalReport, predicates: &Vocabulary) -> String {
    let mut out = String::from("predicate,train_count,group,recall_at_50\n");
    for row in &report.rows {
        let name = predicates.name(row.predicate_id).unwrap_or("?");
        let group = match row.group {
            FrequencyGroup::Head => "head",
            FrequencyGroup::Mid => "mid",
            FrequencyGroup::Tail => "tail",
        };
        let recall = row.recall.map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!("{name},{},{group},{recall}\n", row.train_count));
    }
    out
}
