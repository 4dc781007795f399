//! Translational predicate classifier.
//!
//! A relation's predicate is scored from the difference
//! `f_u(u) - f_s(s) - f_o(o)` of projected subject, object and union
//! features, concatenated with a projection of the 19-dim location feature
//! and passed through a linear softmax classifier. The class set is the
//! predicate vocabulary plus a trailing no-relation class; the no-relation
//! class participates in training and in the softmax, and is masked out
//! later when predictions are ranked.
//!
//! The union feature is either a single vector or a list of candidate
//! vectors pooled by a learned attention scorer (the pseudo-label ablation
//! path).

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::calibrate::{self, CalibrationTable};
use crate::checkpoint;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::LocationFeature;
use crate::nn::{fan_in_init, Mlp, MlpVars};
use crate::optim::{head_lr_schedule, SgdMomentum};

const CHECKPOINT_MAGIC: &[u8; 4] = b"HEAD";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Input feature dimension d.
    pub embed_dim: usize,
    /// Hidden width of the three projection MLPs.
    pub hidden_dim: usize,
    /// Output width e of the projections (the predicate embedding space).
    pub pred_dim: usize,
    pub loc_hidden: usize,
    pub loc_dim: usize,
    /// Predicate class count, no-relation excluded.
    pub n_predicates: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            embed_dim: 512,
            hidden_dim: 512,
            pred_dim: 512,
            loc_hidden: 32,
            loc_dim: 16,
            n_predicates: 50,
            seed: 0,
        }
    }
}

impl HeadConfig {
    /// Total softmax classes: predicates plus the trailing no-relation slot.
    pub fn n_classes(&self) -> usize {
        self.n_predicates + 1
    }

    pub fn no_relation_class(&self) -> usize {
        self.n_predicates
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.hidden_dim == 0
            || self.pred_dim == 0
            || self.loc_hidden == 0
            || self.loc_dim == 0
            || self.n_predicates == 0
        {
            return Err(Error::InvalidArgument(
                "predicate head dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateHeadState {
    pub config: HeadConfig,
    pub f_s: Mlp,
    pub f_o: Mlp,
    pub f_u: Mlp,
    /// 19 -> loc_hidden -> loc_dim projection of the location feature.
    pub loc_mlp: Mlp,
    /// Linear classifier over `[pred_dim + loc_dim]`, `[.., n_classes]`.
    pub w_p: Array2<f64>,
    pub b_p: Array2<f64>,
    /// `[embed_dim, 1]` attention scorer for candidate union features.
    pub attn: Array2<f64>,
    pub epochs_trained: usize,
}

/// Softmax output over predicate classes; the last entry is no-relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateDistribution {
    pub probs: Vec<f64>,
}

impl PredicateDistribution {
    pub fn n_predicates(&self) -> usize {
        self.probs.len().saturating_sub(1)
    }
}

/// Union feature of one entity pair: a single vector, or retrieval
/// candidates for the attention-pooling path.
#[derive(Debug, Clone, PartialEq)]
pub enum UnionFeature {
    Single(Vec<f64>),
    Candidates(Vec<Vec<f64>>),
}

/// One training tuple for the head. `label` may be the no-relation class.
#[derive(Debug, Clone)]
pub struct HeadSample {
    /// Diagnostic identifier, e.g. "scene12:(0,3)".
    pub id: String,
    pub s: Vec<f64>,
    pub o: Vec<f64>,
    pub union: UnionFeature,
    pub loc: [f64; 19],
    pub label: usize,
}

pub fn init_head(config: HeadConfig) -> Result<PredicateHeadState> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let f_s = Mlp::init(config.embed_dim, config.hidden_dim, config.pred_dim, &mut rng);
    let f_o = Mlp::init(config.embed_dim, config.hidden_dim, config.pred_dim, &mut rng);
    let f_u = Mlp::init(config.embed_dim, config.hidden_dim, config.pred_dim, &mut rng);
    let loc_mlp = Mlp::init(19, config.loc_hidden, config.loc_dim, &mut rng);
    let w_p = fan_in_init(&mut rng, config.pred_dim + config.loc_dim, config.n_classes());
    let b_p = Array2::zeros((1, config.n_classes()));
    let attn = fan_in_init(&mut rng, config.embed_dim, 1);
    Ok(PredicateHeadState {
        config,
        f_s,
        f_o,
        f_u,
        loc_mlp,
        w_p,
        b_p,
        attn,
        epochs_trained: 0,
    })
}

/// Fixed parameter order shared by the optimizer, the gradient vector of
/// [`batch_loss_and_grads`], and the checkpoint layout: f_s, f_o, f_u and
/// loc_mlp each as (w1, b1, w2, b2), then w_p, b_p, attn.
pub const HEAD_PARAM_COUNT: usize = 19;

impl PredicateHeadState {
    pub fn params(&self) -> [&Array2<f64>; HEAD_PARAM_COUNT] {
        [
            &self.f_s.w1, &self.f_s.b1, &self.f_s.w2, &self.f_s.b2,
            &self.f_o.w1, &self.f_o.b1, &self.f_o.w2, &self.f_o.b2,
            &self.f_u.w1, &self.f_u.b1, &self.f_u.w2, &self.f_u.b2,
            &self.loc_mlp.w1, &self.loc_mlp.b1, &self.loc_mlp.w2, &self.loc_mlp.b2,
            &self.w_p, &self.b_p, &self.attn,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; HEAD_PARAM_COUNT] {
        let PredicateHeadState {
            f_s, f_o, f_u, loc_mlp, w_p, b_p, attn, ..
        } = self;
        [
            &mut f_s.w1, &mut f_s.b1, &mut f_s.w2, &mut f_s.b2,
            &mut f_o.w1, &mut f_o.b1, &mut f_o.w2, &mut f_o.b2,
            &mut f_u.w1, &mut f_u.b1, &mut f_u.w2, &mut f_u.b2,
            &mut loc_mlp.w1, &mut loc_mlp.b1, &mut loc_mlp.w2, &mut loc_mlp.b2,
            w_p, b_p, attn,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a HeadConfig,
            epochs_trained: usize,
        }
        checkpoint::write_checkpoint(
            path,
            CHECKPOINT_MAGIC,
            &Header {
                config: &self.config,
                epochs_trained: self.epochs_trained,
            },
            &self.params(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: HeadConfig,
            epochs_trained: usize,
        }
        let (header, arrays): (Header, _) = checkpoint::read_checkpoint(path, CHECKPOINT_MAGIC)?;
        if arrays.len() != HEAD_PARAM_COUNT {
            return Err(Error::Checkpoint(format!(
                "{}: expected {HEAD_PARAM_COUNT} parameter tensors, found {}",
                path.display(),
                arrays.len()
            )));
        }
        let mut state = init_head(header.config)?;
        state.epochs_trained = header.epochs_trained;
        for (slot, array) in state.params_mut().into_iter().zip(arrays) {
            if slot.dim() != array.dim() {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter shapes disagree with the header",
                    path.display()
                )));
            }
            *slot = array;
        }
        Ok(state)
    }
}

fn check_dim(state: &PredicateHeadState, what: &str, v: &[f64]) -> Result<()> {
    if v.len() != state.config.embed_dim {
        return Err(Error::InvalidArgument(format!(
            "{what} has dimension {}, head expects {}",
            v.len(),
            state.config.embed_dim
        )));
    }
    Ok(())
}

/// `f_u(u) - f_s(s) - f_o(o)`: the translational residual the classifier
/// reads the predicate from.
pub fn predicate_embedding(
    state: &PredicateHeadState,
    s: &[f64],
    o: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    check_dim(state, "subject feature", s)?;
    check_dim(state, "object feature", o)?;
    check_dim(state, "union feature", u)?;
    let fu = state.f_u.apply(u);
    let fs = state.f_s.apply(s);
    let fo = state.f_o.apply(o);
    Ok(fu
        .iter()
        .zip(&fs)
        .zip(&fo)
        .map(|((u, s), o)| u - s - o)
        .collect())
}

/// Convex combination of candidate vectors, weighted by a softmax over the
/// learned scores `attn . c_i`. A single candidate passes through unchanged.
pub fn attention_pool(state: &PredicateHeadState, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "attention pooling needs at least one candidate".into(),
        ));
    }
    for c in candidates {
        check_dim(state, "pooling candidate", c)?;
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| c.iter().zip(state.attn.column(0)).map(|(x, a)| x * a).sum())
        .collect();
    let alphas = softmax(&scores);
    let mut pooled = vec![0.0; state.config.embed_dim];
    for (alpha, c) in alphas.iter().zip(candidates) {
        for (out, x) in pooled.iter_mut().zip(c) {
            *out += alpha * x;
        }
    }
    Ok(pooled)
}

/// Resolves a [`UnionFeature`] to one vector.
pub fn union_vector(state: &PredicateHeadState, union: &UnionFeature) -> Result<Vec<f64>> {
    match union {
        UnionFeature::Single(u) => {
            check_dim(state, "union feature", u)?;
            Ok(u.clone())
        }
        UnionFeature::Candidates(cs) => attention_pool(state, cs),
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn logits_from_parts(state: &PredicateHeadState, pred_emb: &[f64], loc19: &[f64]) -> Vec<f64> {
    let loc_proj = state.loc_mlp.apply(loc19);
    let feats: Vec<f64> = pred_emb.iter().chain(&loc_proj).cloned().collect();
    let mut logits = state.b_p.row(0).to_vec();
    for (j, logit) in logits.iter_mut().enumerate() {
        *logit += feats
            .iter()
            .zip(state.w_p.column(j))
            .map(|(f, w)| f * w)
            .sum::<f64>();
    }
    logits
}

/// Softmax over `f_p([pred_emb ; loc_mlp(loc)])`.
pub fn classify(
    state: &PredicateHeadState,
    pred_emb: &[f64],
    loc: &LocationFeature,
) -> Result<PredicateDistribution> {
    if pred_emb.len() != state.config.pred_dim {
        return Err(Error::InvalidArgument(format!(
            "predicate embedding has dimension {}, head expects {}",
            pred_emb.len(),
            state.config.pred_dim
        )));
    }
    Ok(PredicateDistribution {
        probs: softmax(&logits_from_parts(state, pred_emb, &loc.concat())),
    })
}

fn classify_parts(
    state: &PredicateHeadState,
    s: &[f64],
    o: &[f64],
    union: &UnionFeature,
    loc19: &[f64],
) -> Result<PredicateDistribution> {
    let u = union_vector(state, union)?;
    let pe = predicate_embedding(state, s, o, &u)?;
    Ok(PredicateDistribution {
        probs: softmax(&logits_from_parts(state, &pe, loc19)),
    })
}

pub fn classify_sample(
    state: &PredicateHeadState,
    sample: &HeadSample,
) -> Result<PredicateDistribution> {
    classify_parts(state, &sample.s, &sample.o, &sample.union, &sample.loc)
}

fn check_sample(state: &PredicateHeadState, sample: &HeadSample) -> Result<()> {
    check_dim(state, "subject feature", &sample.s)?;
    check_dim(state, "object feature", &sample.o)?;
    match &sample.union {
        UnionFeature::Single(u) => check_dim(state, "union feature", u)?,
        UnionFeature::Candidates(cs) => {
            if cs.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has an empty candidate list",
                    sample.id
                )));
            }
            for c in cs {
                check_dim(state, "union candidate", c)?;
            }
        }
    }
    if sample.label >= state.config.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "sample {} labeled {} but the head has {} classes",
            sample.id,
            sample.label,
            state.config.n_classes()
        )));
    }
    Ok(())
}

/// Ordered entity pairs of `scene` with no ground-truth relation, sampled
/// without replacement. Yields `min(ceil(ratio * |relations|), available)`
/// pairs, deterministically per seed.
pub fn sample_no_relation_pairs(
    scene: &Scene,
    ratio: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "no-relation sampling ratio must be positive, got {ratio}"
        )));
    }
    let annotated: std::collections::BTreeSet<(usize, usize)> = scene
        .relations
        .iter()
        .map(|r| (r.subject_idx, r.object_idx))
        .collect();
    let mut available: Vec<(usize, usize)> = Vec::new();
    for i in 0..scene.entities.len() {
        for j in 0..scene.entities.len() {
            if i != j && !annotated.contains(&(i, j)) {
                available.push((i, j));
            }
        }
    }
    let want = ((ratio * scene.relations.len() as f64).ceil() as usize).min(available.len());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    available.shuffle(&mut rng);
    available.truncate(want);
    Ok(available)
}

struct HeadVars {
    fs: MlpVars,
    fo: MlpVars,
    fu: MlpVars,
    loc: MlpVars,
    w_p: Var,
    b_p: Var,
    attn: Var,
}

fn load_vars(state: &PredicateHeadState, tape: &mut Tape) -> HeadVars {
    HeadVars {
        fs: state.f_s.vars(tape),
        fo: state.f_o.vars(tape),
        fu: state.f_u.vars(tape),
        loc: state.loc_mlp.vars(tape),
        w_p: tape.leaf(state.w_p.clone()),
        b_p: tape.leaf(state.b_p.clone()),
        attn: tape.leaf(state.attn.clone()),
    }
}

fn pool_on_tape(tape: &mut Tape, attn: Var, candidates: &[Vec<f64>]) -> Var {
    let dim = candidates[0].len();
    let mut mat = Array2::zeros((candidates.len(), dim));
    for (i, c) in candidates.iter().enumerate() {
        for (j, v) in c.iter().enumerate() {
            mat[(i, j)] = *v;
        }
    }
    let c = tape.leaf(mat);
    let scores = tape.matmul(c, attn);
    let scores_row = tape.transpose(scores);
    let alphas = tape.softmax_rows(scores_row);
    tape.matmul(alphas, c)
}

/// Mean cross-entropy of one minibatch plus its gradient, one array per
/// entry of [`PredicateHeadState::params_mut`], in that order.
pub fn batch_loss_and_grads(
    state: &PredicateHeadState,
    samples: &[HeadSample],
) -> Result<(f64, Vec<Array2<f64>>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty head batch".into()));
    }
    for sample in samples {
        check_sample(state, sample)?;
    }
    let d = state.config.embed_dim;
    let b = samples.len();

    let mut tape = Tape::new();
    let vars = load_vars(state, &mut tape);

    let mut s_mat = Array2::zeros((b, d));
    let mut o_mat = Array2::zeros((b, d));
    let mut l_mat = Array2::zeros((b, 19));
    let mut labels = Vec::with_capacity(b);
    let mut u_rows = Vec::with_capacity(b);
    for (i, sample) in samples.iter().enumerate() {
        for (j, v) in sample.s.iter().enumerate() {
            s_mat[(i, j)] = *v;
        }
        for (j, v) in sample.o.iter().enumerate() {
            o_mat[(i, j)] = *v;
        }
        for (j, v) in sample.loc.iter().enumerate() {
            l_mat[(i, j)] = *v;
        }
        labels.push(sample.label);
        u_rows.push(match &sample.union {
            UnionFeature::Single(u) => tape.leaf_row(u),
            UnionFeature::Candidates(cs) => pool_on_tape(&mut tape, vars.attn, cs),
        });
    }
    let s = tape.leaf(s_mat);
    let o = tape.leaf(o_mat);
    let l = tape.leaf(l_mat);
    let u = tape.concat_rows(&u_rows);

    let fs_out = Mlp::forward(&mut tape, vars.fs, s);
    let fo_out = Mlp::forward(&mut tape, vars.fo, o);
    let fu_out = Mlp::forward(&mut tape, vars.fu, u);
    let pe = tape.sub(fu_out, fs_out);
    let pe = tape.sub(pe, fo_out);
    let loc_proj = Mlp::forward(&mut tape, vars.loc, l);
    let feats = tape.concat_cols(&[pe, loc_proj]);
    let logits = tape.matmul(feats, vars.w_p);
    let logits = tape.add_row(logits, vars.b_p);
    let loss_node = tape.cross_entropy_mean(logits, &labels);

    let grads = tape.backward(loss_node);
    let shapes = state.params();
    let handles = [
        vars.fs.w1, vars.fs.b1, vars.fs.w2, vars.fs.b2,
        vars.fo.w1, vars.fo.b1, vars.fo.w2, vars.fo.b2,
        vars.fu.w1, vars.fu.b1, vars.fu.w2, vars.fu.b2,
        vars.loc.w1, vars.loc.b1, vars.loc.w2, vars.loc.b2,
        vars.w_p, vars.b_p, vars.attn,
    ];
    let collected = handles
        .iter()
        .zip(shapes)
        .map(|(h, p)| grads.wrt_or_zero(*h, p.dim()))
        .collect();
    Ok((tape.scalar(loss_node), collected))
}

/// `-ln P(label)` for one sample, from stable log-sum-exp.
pub fn sample_cross_entropy(state: &PredicateHeadState, sample: &HeadSample) -> Result<f64> {
    check_sample(state, sample)?;
    let u = union_vector(state, &sample.union)?;
    let pe = predicate_embedding(state, &sample.s, &sample.o, &u)?;
    let logits = logits_from_parts(state, &pe, &sample.loc);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[sample.label])
}

pub fn mean_cross_entropy(state: &PredicateHeadState, samples: &[HeadSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for sample in samples {
        total += sample_cross_entropy(state, sample)?;
    }
    Ok(total / samples.len() as f64)
}

/// Top-1 accuracy over all classes (including no-relation).
pub fn accuracy(state: &PredicateHeadState, samples: &[HeadSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut hits = 0usize;
    for sample in samples {
        let dist = classify_sample(state, sample)?;
        let mut best = 0;
        for (k, p) in dist.probs.iter().enumerate() {
            if *p > dist.probs[best] {
                best = k;
            }
        }
        if best == sample.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 100,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    /// Learning rate the schedule assigned to this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Minibatch SGD with momentum under the alternating learning-rate
/// schedule ([`head_lr_schedule`]). Returns the checkpoint with the lowest
/// validation cross-entropy (the final state when `val` is empty) and the
/// per-epoch trace.
pub fn train_head(
    state: PredicateHeadState,
    train: &[HeadSample],
    val: &[HeadSample],
    cfg: &HeadTrainConfig,
    mut on_epoch: impl FnMut(&PredicateHeadState, HeadEpoch) -> Result<()>,
) -> Result<(PredicateHeadState, Vec<HeadEpoch>)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "head training needs at least one sample".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "head training needs positive epochs and batch size".into(),
        ));
    }
    for sample in train.iter().chain(val) {
        check_sample(&state, sample)?;
    }

    let mut state = state;
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, PredicateHeadState)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = head_lr_schedule(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<HeadSample> = batch.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = batch_loss_and_grads(&state, &samples)?;
            if !loss.is_finite() {
                let culprit = samples
                    .iter()
                    .find(|s| {
                        sample_cross_entropy(&state, s)
                            .map(|l| !l.is_finite())
                            .unwrap_or(true)
                    })
                    .map(|s| s.id.clone())
                    .unwrap_or_else(|| samples[0].id.clone());
                return Err(Error::Training(format!(
                    "non-finite head loss at epoch {epoch}, sample {culprit}"
                )));
            }
            epoch_loss += loss * samples.len() as f64;
            let grad_refs: Vec<&Array2<f64>> = grads.iter().collect();
            opt.step(&mut state.params_mut(), &grad_refs, lr);
        }
        state.epochs_trained += 1;

        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_cross_entropy(&state, val)?)
        };
        if let Some(v) = val_loss {
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, state.clone()));
            }
        }
        let row = HeadEpoch {
            epoch,
            lr,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        };
        trace.push(row);
        on_epoch(&state, row)?;
    }
    let final_state = match best {
        Some((_, s)) => s,
        None => state,
    };
    Ok((final_state, trace))
}

/// Subject/object/union features and location encoding of one entity pair,
/// ready for classification.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub s: Vec<f64>,
    pub o: Vec<f64>,
    pub union: UnionFeature,
    pub loc: [f64; 19],
}

/// Per-pair class scores. Uncalibrated runs carry softmax probabilities;
/// calibrated runs carry unnormalized adjusted scores. The last entry is
/// no-relation either way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub subject_idx: usize,
    pub object_idx: usize,
    pub scores: Vec<f64>,
}

/// Scores every candidate entity pair of the scene (the distinct annotated
/// pairs). Calibration is applied when a table is supplied.
pub fn predict_scene(
    state: &PredicateHeadState,
    scene: &Scene,
    features: &BTreeMap<(usize, usize), PairFeatures>,
    table: Option<&CalibrationTable>,
) -> Result<Vec<PairPrediction>> {
    let mut out = Vec::new();
    for (si, oi) in scene.candidate_pairs() {
        let f = features.get(&(si, oi)).ok_or_else(|| {
            Error::MissingEmbedding(format!(
                "scene {}: no features for entity pair ({si}, {oi})",
                scene.image_id
            ))
        })?;
        let dist = classify_parts(state, &f.s, &f.o, &f.union, &f.loc)?;
        let scores = match table {
            Some(t) => calibrate::adjust(&dist, t)?,
            None => dist.probs,
        };
        out.push(PairPrediction {
            subject_idx: si,
            object_idx: oi,
            scores,
        });
    }
    Ok(out)
}
