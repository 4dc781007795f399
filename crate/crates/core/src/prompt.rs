//! Visually grounded prompt learner.
//!
//! A relation's text prompt is assembled as
//! `[SOS] subject tokens, (v_1 + pi) .. (v_M + pi), object tokens [EOS]`
//! where the `v_m` are learned context vectors shared across relations and
//! `pi = h(u_img)` is a per-image bias produced by a small MLP from the
//! union region's image embedding. Encoding the prompt yields `u_txt`, a
//! text-side stand-in for the union feature.
//!
//! Training pulls `u_txt` toward the union image embedding and away from the
//! embedding of the retrieved pseudo-label text:
//! `L = ln(1 + exp(sim(u_img, pseudo) - sim(u_img, u_txt)))`,
//! with gradients flowing through the frozen encoder into the context
//! vectors and the bias MLP only.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::embed::tokenizer::{CTX_TOKEN, EOS_TOKEN, SOS_TOKEN};
use crate::embed::{cosine_sim, EmbeddingVector, TokenSequence, VisionLanguageEncoder};
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Standard deviation of the context vector initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PRMT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Number of learned context tokens.
    pub context_tokens: usize,
    /// Image embedding dimension (input of the bias MLP).
    pub embed_dim: usize,
    /// Token embedding dimension (output of the bias MLP).
    pub token_dim: usize,
    /// Hidden width of the bias MLP; 0 means `embed_dim / 16`.
    pub bias_hidden: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            context_tokens: 4,
            embed_dim: 64,
            token_dim: 32,
            bias_hidden: 0,
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn bias_hidden_dim(&self) -> usize {
        if self.bias_hidden > 0 {
            self.bias_hidden
        } else {
            (self.embed_dim / 16).max(1)
        }
    }
}

/// Trainable prompt parameters. Everything else in the text path is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLearnerState {
    pub config: PromptConfig,
    /// `[context_tokens, token_dim]` learned context vectors.
    pub context: Array2<f64>,
    /// `embed_dim -> bias_hidden -> token_dim`.
    pub bias: Mlp,
    pub epochs_trained: usize,
}

/// Fresh state: context vectors are small gaussians, the bias MLP uses
/// fan-in initialization.
pub fn init_prompt_learner(config: PromptConfig) -> Result<PromptLearnerState> {
    if config.context_tokens == 0 || config.embed_dim == 0 || config.token_dim == 0 {
        return Err(Error::InvalidArgument(
            "prompt learner dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, CONTEXT_INIT_STD).expect("valid std");
    let context = Array2::from_shape_fn((config.context_tokens, config.token_dim), |_| {
        normal.sample(&mut rng)
    });
    let bias = Mlp::init(
        config.embed_dim,
        config.bias_hidden_dim(),
        config.token_dim,
        &mut rng,
    );
    Ok(PromptLearnerState {
        config,
        context,
        bias,
        epochs_trained: 0,
    })
}

impl PromptLearnerState {
    pub fn parameter_count(&self) -> usize {
        self.context.len() + self.bias.parameter_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a PromptConfig,
            epochs_trained: usize,
        }
        checkpoint::write_checkpoint(
            path,
            CHECKPOINT_MAGIC,
            &Header {
                config: &self.config,
                epochs_trained: self.epochs_trained,
            },
            &[
                &self.context,
                &self.bias.w1,
                &self.bias.b1,
                &self.bias.w2,
                &self.bias.b2,
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: PromptConfig,
            epochs_trained: usize,
        }
        let (header, arrays): (Header, _) = checkpoint::read_checkpoint(path, CHECKPOINT_MAGIC)?;
        let [context, w1, b1, w2, b2]: [Array2<f64>; 5] = arrays.try_into().map_err(|_| {
            Error::Checkpoint(format!("{}: wrong array count", path.display()))
        })?;
        let state = PromptLearnerState {
            config: header.config,
            context,
            bias: Mlp { w1, b1, w2, b2 },
            epochs_trained: header.epochs_trained,
        };
        if state.context.dim()
            != (
                header.config.context_tokens,
                header.config.token_dim,
            )
            || state.bias.in_dim() != header.config.embed_dim
            || state.bias.out_dim() != header.config.token_dim
        {
            return Err(Error::Checkpoint(format!(
                "{}: parameter shapes disagree with the header",
                path.display()
            )));
        }
        Ok(state)
    }
}

fn check_u_img(state: &PromptLearnerState, u_img: &EmbeddingVector) -> Result<()> {
    if u_img.dim() != state.config.embed_dim {
        return Err(Error::InvalidArgument(format!(
            "union image embedding has dimension {}, prompt learner expects {}",
            u_img.dim(),
            state.config.embed_dim
        )));
    }
    Ok(())
}

/// The per-image bias `pi = h(u_img)`, a single token-space vector.
pub fn compute_bias(state: &PromptLearnerState, u_img: &EmbeddingVector) -> Result<Vec<f64>> {
    check_u_img(state, u_img)?;
    Ok(state.bias.apply(&u_img.to_f64()))
}

/// Interior (no SOS/EOS) token ids and rows for a label text.
fn interior_tokens(
    encoder: &dyn VisionLanguageEncoder,
    text: &str,
) -> Result<(Vec<u32>, Array2<f64>)> {
    let ids = encoder.tokenize(text)?;
    let interior: Vec<u32> = ids[1..ids.len() - 1].to_vec();
    let rows = encoder.token_rows(&interior);
    Ok((interior, rows))
}

/// Builds the prompt token sequence for one (subject, object, union image)
/// triple. Context rows are `context[m] + pi`; their ids are [`CTX_TOKEN`].
pub fn assemble_prompt(
    state: &PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    subject: &str,
    object: &str,
    u_img: &EmbeddingVector,
) -> Result<TokenSequence> {
    if encoder.token_dim() != state.config.token_dim {
        return Err(Error::InvalidArgument(format!(
            "encoder token dimension {} does not match prompt learner {}",
            encoder.token_dim(),
            state.config.token_dim
        )));
    }
    let pi = compute_bias(state, u_img)?;
    let (subj_ids, subj_rows) = interior_tokens(encoder, subject)?;
    let (obj_ids, obj_rows) = interior_tokens(encoder, object)?;

    let m = state.config.context_tokens;
    let total = 2 + subj_ids.len() + m + obj_ids.len();
    if total > encoder.max_tokens() {
        return Err(Error::TokenLimit(format!(
            "prompt for ({subject:?}, {object:?}) needs {total} tokens, budget is {}",
            encoder.max_tokens()
        )));
    }

    let dt = state.config.token_dim;
    let mut ids = Vec::with_capacity(total);
    let mut rows = Array2::zeros((total, dt));
    let mut at = 0;

    let sos_rows = encoder.token_rows(&[SOS_TOKEN]);
    ids.push(SOS_TOKEN);
    rows.row_mut(at).assign(&sos_rows.row(0));
    at += 1;

    for (i, &id) in subj_ids.iter().enumerate() {
        ids.push(id);
        rows.row_mut(at).assign(&subj_rows.row(i));
        at += 1;
    }

    for ctx_row in state.context.rows() {
        ids.push(CTX_TOKEN);
        for (j, v) in ctx_row.iter().enumerate() {
            rows[(at, j)] = v + pi[j];
        }
        at += 1;
    }

    for (i, &id) in obj_ids.iter().enumerate() {
        ids.push(id);
        rows.row_mut(at).assign(&obj_rows.row(i));
        at += 1;
    }

    let eos_rows = encoder.token_rows(&[EOS_TOKEN]);
    ids.push(EOS_TOKEN);
    rows.row_mut(at).assign(&eos_rows.row(0));

    Ok(TokenSequence { ids, rows })
}

/// Encodes the assembled prompt: the learned text-side union feature.
pub fn union_text_embedding(
    state: &PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    subject: &str,
    object: &str,
    u_img: &EmbeddingVector,
) -> Result<EmbeddingVector> {
    let seq = assemble_prompt(state, encoder, subject, object, u_img)?;
    encoder.encode_token_sequence(&seq)
}

/// `ln(1 + exp(sim(u_img, pseudo) - sim(u_img, u_txt)))`: low when the
/// learned text feature is closer to the image than the pseudo-label text
/// is. Equal similarities give ln 2.
pub fn contrastive_loss(
    u_img: &EmbeddingVector,
    u_txt: &EmbeddingVector,
    pseudo_txt: &EmbeddingVector,
) -> Result<f64> {
    let sim_pos = cosine_sim(u_img, u_txt)?;
    let sim_neg = cosine_sim(u_img, pseudo_txt)?;
    let x = sim_neg - sim_pos;
    Ok(x.max(0.0) + (-x.abs()).exp().ln_1p())
}

/// One training example: a relation with its union image embedding and the
/// text embedding of its retrieved pseudo-label (a constant during prompt
/// training).
#[derive(Debug, Clone)]
pub struct PromptSample {
    /// Identifier used in diagnostics, e.g. "scene3:(0,2)".
    pub id: String,
    pub subject: String,
    pub object: String,
    pub u_img: EmbeddingVector,
    pub pseudo_txt: EmbeddingVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        PromptTrainConfig {
            epochs: 500,
            learning_rate: 2e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PromptEpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub struct SampleGrads {
    /// Loss from the tape's f64 forward pass. [`sample_loss`] differs by
    /// float rounding: the eager encoder path truncates `u_txt` to f32.
    pub loss: f64,
    pub d_context: Array2<f64>,
    pub d_bias: [Array2<f64>; 4],
}

/// Forward/backward for one sample. The pseudo-label similarity is computed
/// eagerly: it does not depend on the trainable parameters.
pub fn sample_loss_grads(
    state: &PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    sample: &PromptSample,
) -> Result<SampleGrads> {
    check_u_img(state, &sample.u_img)?;
    let sim_neg = cosine_sim(&sample.u_img, &sample.pseudo_txt)?;
    let (_, subj_rows) = interior_tokens(encoder, &sample.subject)?;
    let (_, obj_rows) = interior_tokens(encoder, &sample.object)?;
    let total = 2 + subj_rows.dim().0 + state.config.context_tokens + obj_rows.dim().0;
    if total > encoder.max_tokens() {
        return Err(Error::TokenLimit(format!(
            "prompt for sample {} needs {total} tokens, budget is {}",
            sample.id,
            encoder.max_tokens()
        )));
    }

    let mut tape = Tape::new();
    let ctx = tape.leaf(state.context.clone());
    let bias_vars = state.bias.vars(&mut tape);

    let u_row = tape.leaf_row(&sample.u_img.to_f64());
    let pi = Mlp::forward(&mut tape, bias_vars, u_row);
    let ctx_biased = tape.add_row(ctx, pi);

    let mut parts = Vec::with_capacity(5);
    let sos = tape.leaf(encoder.token_rows(&[SOS_TOKEN]));
    parts.push(sos);
    if subj_rows.dim().0 > 0 {
        parts.push(tape.leaf(subj_rows));
    }
    parts.push(ctx_biased);
    if obj_rows.dim().0 > 0 {
        parts.push(tape.leaf(obj_rows));
    }
    parts.push(tape.leaf(encoder.token_rows(&[EOS_TOKEN])));
    let prompt_rows = tape.concat_rows(&parts);

    let u_txt = encoder.encode_sequence_var(&mut tape, prompt_rows);
    let u_img_leaf = tape.leaf_row(&sample.u_img.to_f64());
    let sim_pos = tape.dot(u_txt, u_img_leaf);
    let neg = tape.leaf(Array2::from_elem((1, 1), sim_neg));
    let margin = tape.sub(neg, sim_pos);
    let loss_node = tape.softplus(margin);
    let loss = tape.scalar(loss_node);

    let grads = tape.backward(loss_node);
    Ok(SampleGrads {
        loss,
        d_context: grads.wrt_or_zero(ctx, state.context.dim()),
        d_bias: [
            grads.wrt_or_zero(bias_vars.w1, state.bias.w1.dim()),
            grads.wrt_or_zero(bias_vars.b1, state.bias.b1.dim()),
            grads.wrt_or_zero(bias_vars.w2, state.bias.w2.dim()),
            grads.wrt_or_zero(bias_vars.b2, state.bias.b2.dim()),
        ],
    })
}

/// Loss of one sample under the current parameters (no gradients).
pub fn sample_loss(
    state: &PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    sample: &PromptSample,
) -> Result<f64> {
    let u_txt = union_text_embedding(state, encoder, &sample.subject, &sample.object, &sample.u_img)?;
    contrastive_loss(&sample.u_img, &u_txt, &sample.pseudo_txt)
}

/// Mean loss over a sample set.
pub fn mean_loss(
    state: &PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    samples: &[PromptSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no prompt samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(state, encoder, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of samples whose learned text feature is strictly closer to the
/// union image than the pseudo-label text is.
pub fn separation_rate(
    state: &PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    samples: &[PromptSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no prompt samples".into()));
    }
    let mut wins = 0usize;
    for s in samples {
        let u_txt = union_text_embedding(state, encoder, &s.subject, &s.object, &s.u_img)?;
        let pos = cosine_sim(&s.u_img, &u_txt)?;
        let neg = cosine_sim(&s.u_img, &s.pseudo_txt)?;
        if pos > neg {
            wins += 1;
        }
    }
    Ok(wins as f64 / samples.len() as f64)
}

/// Plain SGD over shuffled minibatches. The encoder is frozen: only the
/// context vectors and bias MLP move. Returns the trained state and one
/// stats row per epoch; `on_epoch` fires after each epoch for checkpointing.
pub fn train_prompt_learner(
    state: PromptLearnerState,
    encoder: &dyn VisionLanguageEncoder,
    samples: &[PromptSample],
    cfg: &PromptTrainConfig,
    mut on_epoch: impl FnMut(&PromptLearnerState, PromptEpochStats) -> Result<()>,
) -> Result<(PromptLearnerState, Vec<PromptEpochStats>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt training needs at least one sample".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "prompt training needs positive epochs and batch size".into(),
        ));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "prompt learning rate must be positive".into(),
        ));
    }

    let mut state = state;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut d_context = Array2::zeros(state.context.dim());
            let mut d_bias = [
                Array2::zeros(state.bias.w1.dim()),
                Array2::zeros(state.bias.b1.dim()),
                Array2::zeros(state.bias.w2.dim()),
                Array2::zeros(state.bias.b2.dim()),
            ];
            for &i in batch {
                let g = sample_loss_grads(&state, encoder, &samples[i])?;
                if !g.loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite prompt loss at epoch {epoch}, sample {}",
                        samples[i].id
                    )));
                }
                epoch_loss += g.loss;
                d_context += &g.d_context;
                for (acc, g) in d_bias.iter_mut().zip(&g.d_bias) {
                    *acc += g;
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            state.context.zip_mut_with(&d_context, |p, g| *p -= scale * g);
            for (p, g) in state.bias.params_mut().into_iter().zip(&d_bias) {
                p.zip_mut_with(g, |pi, gi| *pi -= scale * gi);
            }
        }
        state.epochs_trained += 1;
        let row = PromptEpochStats {
            epoch,
            mean_loss: epoch_loss / samples.len() as f64,
        };
        stats.push(row);
        on_epoch(&state, row)?;
    }
    Ok((state, stats))
}
