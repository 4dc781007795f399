//! Deterministic fixtures shared by the benchmark targets, sized roughly
//! like one pipeline run so the numbers track real stage costs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crepe_core::data::{BoundingBox, TripletVocabulary};
use crepe_core::embed::{EmbeddingVector, StubEncoder, StubEncoderConfig, VisionLanguageEncoder};
use crepe_core::head::{init_head, HeadConfig, HeadSample, PredicateHeadState, UnionFeature};
use crepe_core::metrics::{RankedTriplet, ScenePredictions};
use crepe_core::prompt::{init_prompt_learner, PromptConfig, PromptLearnerState, PromptSample};

pub const EMBED_DIM: usize = 32;
pub const N_PREDICATES: usize = 20;

pub fn encoder() -> StubEncoder {
    StubEncoder::new(StubEncoderConfig {
        seed: 11,
        token_dim: 16,
        embed_dim: EMBED_DIM,
        hash_space: 2048,
    })
    .expect("valid encoder config")
}

/// `n` triplet strings over a small vocabulary, with cached embeddings.
pub fn triplet_vocabulary(enc: &StubEncoder, n: usize) -> TripletVocabulary {
    let entries: Vec<String> = (0..n)
        .map(|i| format!("obj{:03} rel{:03} obj{:03}", i % 37, i % N_PREDICATES, (i * 7) % 37))
        .collect();
    let embeddings = entries
        .iter()
        .map(|t| enc.encode_text(t).expect("triplet embeds"))
        .collect();
    TripletVocabulary {
        entries,
        embeddings: Some(embeddings),
    }
}

pub fn unit_vector(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

pub fn query(seed: u64) -> EmbeddingVector {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let v = unit_vector(&mut rng, EMBED_DIM);
    EmbeddingVector::new(v.into_iter().map(|x| x as f32).collect())
}

pub fn random_box(rng: &mut ChaCha20Rng) -> BoundingBox {
    BoundingBox::new(
        rng.gen_range(0.0..200.0),
        rng.gen_range(0.0..200.0),
        rng.gen_range(1.0..100.0),
        rng.gen_range(1.0..100.0),
    )
    .expect("positive extent")
}

pub fn head_fixture(n_samples: usize) -> (PredicateHeadState, Vec<HeadSample>) {
    let state = init_head(HeadConfig {
        embed_dim: EMBED_DIM,
        hidden_dim: 64,
        pred_dim: 32,
        loc_hidden: 32,
        loc_dim: 16,
        n_predicates: N_PREDICATES,
        seed: 3,
    })
    .expect("valid head config");
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let samples = (0..n_samples)
        .map(|i| {
            let mut loc = [0.0; 19];
            for v in &mut loc {
                *v = rng.gen_range(-2.0..2.0);
            }
            HeadSample {
                id: format!("bench:{i}"),
                s: unit_vector(&mut rng, EMBED_DIM),
                o: unit_vector(&mut rng, EMBED_DIM),
                union: UnionFeature::Single(unit_vector(&mut rng, EMBED_DIM)),
                loc,
                label: i % N_PREDICATES,
            }
        })
        .collect();
    (state, samples)
}

pub fn prompt_fixture(enc: &StubEncoder) -> (PromptLearnerState, PromptSample) {
    let state = init_prompt_learner(PromptConfig {
        context_tokens: 4,
        embed_dim: EMBED_DIM,
        token_dim: 16,
        bias_hidden: 24,
        seed: 5,
    })
    .expect("valid prompt config");
    let sample = PromptSample {
        id: "bench:0".into(),
        subject: "obj001".into(),
        object: "obj002".into(),
        u_img: query(23),
        pseudo_txt: enc.encode_text("obj001 rel003 obj002").expect("text embeds"),
    };
    (state, sample)
}

/// `n_scenes` scenes of ranked predictions, 20 candidate pairs each, with a
/// handful of ground-truth triplets per scene.
pub fn ranked_scenes(n_scenes: usize) -> Vec<ScenePredictions> {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    (0..n_scenes)
        .map(|_| {
            let mut ranked: Vec<RankedTriplet> = (0..20)
                .map(|_| RankedTriplet {
                    subject_idx: rng.gen_range(0..5),
                    object_idx: rng.gen_range(0..5),
                    predicate_id: rng.gen_range(0..N_PREDICATES),
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
            let gt = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0..5),
                        rng.gen_range(0..5),
                        rng.gen_range(0..N_PREDICATES),
                    )
                })
                .collect();
            ScenePredictions { ranked, gt }
        })
        .collect()
}
