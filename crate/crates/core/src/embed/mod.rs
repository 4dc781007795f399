//! Embedding layer: the vision/language encoder contract, a deterministic
//! seeded encoder stub, a binary on-disk embedding cache, and cosine-space
//! pseudo-label retrieval.

pub mod cache;
pub mod retrieval;
pub mod stub;
pub mod tokenizer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::synthetic::RegionLatent;
use crate::data::BoundingBox;
use crate::error::{Error, Result};

pub use cache::{CachedEncoder, EmbeddingCache};
pub use retrieval::{retrieve_pseudo_labels, RetrievedLabel};
pub use stub::{StubEncoder, StubEncoderConfig};
pub use tokenizer::{CTX_TOKEN, EOS_TOKEN, MAX_TOKENS, SOS_TOKEN};

/// A dense embedding. Values are stored in f32 (the interchange and disk
/// precision); training math promotes to f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    /// True when the vector lies on the unit sphere (within f32 tolerance).
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw values, deriving the `normalized` flag from the L2 norm.
    pub fn new(values: Vec<f32>) -> Self {
        let norm = norm_f64(&values);
        let normalized = (norm - 1.0).abs() < 1e-4;
        EmbeddingVector { values, normalized }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Returns a unit-norm copy. Errors on an all-zero vector.
    pub fn normalize(&self) -> Result<Self> {
        let norm = norm_f64(&self.values);
        if norm == 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalize a zero vector".into(),
            ));
        }
        Ok(EmbeddingVector::new(
            self.values.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        ))
    }
}

fn norm_f64(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity accumulated in f64. Errors on dimension mismatch or a
/// zero-norm input.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "cosine of vectors with dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mut dot = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        dot += x as f64 * y as f64;
    }
    let (na, nb) = (norm_f64(&a.values), norm_f64(&b.values));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine of a zero vector is undefined".into(),
        ));
    }
    Ok(dot / (na * nb))
}

/// A tokenized text with one embedding row per token. Rows are what the
/// sequence encoder consumes; ids are bookkeeping (context slots use
/// [`CTX_TOKEN`] and take their rows from the prompt learner, not the token
/// table).
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `[len, token_dim]`.
    pub rows: Array2<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, max_tokens: usize) -> Result<()> {
        if self.ids.len() != self.rows.dim().0 {
            return Err(Error::InvalidArgument(format!(
                "token sequence has {} ids but {} embedding rows",
                self.ids.len(),
                self.rows.dim().0
            )));
        }
        if self.ids.len() < 2 || self.ids[0] != SOS_TOKEN || *self.ids.last().unwrap() != EOS_TOKEN
        {
            return Err(Error::InvalidArgument(
                "token sequence must start with SOS and end with EOS".into(),
            ));
        }
        if self.ids.len() > max_tokens {
            return Err(Error::TokenLimit(format!(
                "sequence of {} tokens exceeds the budget of {max_tokens}",
                self.ids.len()
            )));
        }
        Ok(())
    }
}

/// Raw image pixels, row-major RGB with values in [0, 1].
#[derive(Debug, Clone)]
pub struct PixelBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl PixelBuffer {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer of {}x{} needs {} values, got {}",
                width,
                height,
                width * height * 3,
                rgb.len()
            )));
        }
        Ok(PixelBuffer { width, height, rgb })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let base = (y * self.width + x) * 3;
        [self.rgb[base], self.rgb[base + 1], self.rgb[base + 2]]
    }
}

/// Visual content of a synthetic scene, resolved by exact box lookup.
#[derive(Debug, Clone, Copy)]
pub struct LatentView<'a> {
    pub scene_id: &'a str,
    pub regions: &'a [RegionLatent],
    /// Cosine between a union region's embedding and its triplet text.
    pub union_alignment: f64,
    /// Cosine between an entity crop's embedding and its label text.
    pub entity_alignment: f64,
}

/// Where an image region's appearance comes from.
#[derive(Debug, Clone, Copy)]
pub enum RegionSource<'a> {
    Pixels(&'a PixelBuffer),
    Latent(LatentView<'a>),
}

/// Joint text/image encoder with frozen weights.
///
/// All outputs are L2-normalized and deterministic per (config, input). The
/// text path is additionally differentiable with respect to the input token
/// rows via [`VisionLanguageEncoder::encode_sequence_var`], which is what
/// lets the prompt learner backpropagate through a frozen encoder.
pub trait VisionLanguageEncoder {
    fn embed_dim(&self) -> usize;
    fn token_dim(&self) -> usize;

    fn max_tokens(&self) -> usize {
        MAX_TOKENS
    }

    /// Text to token ids, bracketed by SOS/EOS.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;

    /// Embedding table rows for the given ids, `[len, token_dim]`.
    fn token_rows(&self, ids: &[u32]) -> Array2<f64>;

    /// Differentiable sequence encoder: token rows `[len, token_dim]` in,
    /// L2-normalized `[1, embed_dim]` out. Positional information is added
    /// internally.
    fn encode_sequence_var(&self, tape: &mut Tape, rows: Var) -> Var;

    fn encode_image_region(
        &self,
        source: &RegionSource<'_>,
        bbox: &BoundingBox,
    ) -> Result<EmbeddingVector>;

    /// Digest of the frozen weights, for asserting the encoder is untouched
    /// by training.
    fn fingerprint(&self) -> u64;

    fn token_sequence(&self, text: &str) -> Result<TokenSequence> {
        let ids = self.tokenize(text)?;
        let rows = self.token_rows(&ids);
        Ok(TokenSequence { ids, rows })
    }

    /// Eager counterpart of [`VisionLanguageEncoder::encode_sequence_var`].
    fn encode_token_sequence(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        seq.validate(self.max_tokens())?;
        let mut tape = Tape::new();
        let rows = tape.leaf(seq.rows.clone());
        let out = self.encode_sequence_var(&mut tape, rows);
        let values = tape.value(out).iter().map(|&v| v as f32).collect();
        Ok(EmbeddingVector::new(values))
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        let seq = self.token_sequence(text)?;
        self.encode_token_sequence(&seq)
    }
}
