//! Acceptance suite: nine independent checks covering the formula oracles,
//! both gradient paths, planted-structure recovery, contrastive prompt
//! efficacy, the ranking metric, calibration, the ablation ordering, the
//! learning-rate schedule and bit-level determinism. Each check prints one
//! PASS/FAIL line; run with
//! `cargo test -p crepe-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crepe_core::calibrate::{adjust, estimate_frequencies, CalibrationTable};
use crepe_core::data::synthetic::{
    generate_synthetic_dataset, materialize_planted, SyntheticConfig,
};
use crepe_core::data::BoundingBox;
use crepe_core::embed::stub::seeded_unit_vector;
use crepe_core::embed::{
    EmbeddingVector, StubEncoder, StubEncoderConfig, VisionLanguageEncoder,
};
use crepe_core::geometry::{encode_entity_location, encode_pair_location};
use crepe_core::head::{
    accuracy, batch_loss_and_grads, init_head, train_head, HeadConfig, HeadSample,
    HeadTrainConfig, PredicateDistribution, UnionFeature, HEAD_PARAM_COUNT,
};
use crepe_core::metrics::{mean_recall_at_k, RankedTriplet, ScenePredictions};
use crepe_core::prompt::{
    init_prompt_learner, mean_loss, sample_loss_grads, separation_rate, train_prompt_learner,
    PromptConfig, PromptSample, PromptTrainConfig,
};
use crepe_cli::config::{DatasetConfig, EncoderConfig, HeadStageConfig, PromptStageConfig};
use crepe_cli::stages::{artifact, load_report};
use crepe_cli::{run_all, PipelineConfig};

/// Fails the check with a formatted reason unless the condition holds.
macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err(format!($($arg)+));
        }
    };
}

/// The expensive checks train models or run whole pipelines; they take this
/// lock so their runtime budgets measure the work itself, not scheduling
/// contention from parallel test threads.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_lock() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints exactly one PASS or FAIL line for a check, then propagates any
/// failure to the harness. Panics inside the body become FAIL lines too.
fn report(label: &str, body: impl FnOnce() -> Result<String, String>) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(detail)) => println!("{label}: PASS ({detail})"),
        Ok(Err(why)) => {
            println!("{label}: FAIL ({why})");
            panic!("{label}: {why}");
        }
        Err(cause) => {
            let why = cause
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| cause.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            println!("{label}: FAIL ({why})");
            panic!("{label}: {why}");
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

// ---------------------------------------------------------------------------
// 1. Spatial feature formulas against hand-written arithmetic.

#[test]
fn acceptance_1_spatial_feature_formulas() {
    report("[1/9] spatial feature formulas", || {
        let t0 = Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let gen_box = |rng: &mut ChaCha20Rng| {
            BoundingBox::new(
                rng.gen_range(-200.0..200.0),
                rng.gen_range(-200.0..200.0),
                rng.gen_range(1.0..150.0),
                rng.gen_range(1.0..150.0),
            )
            .unwrap()
        };
        let mut max_err = 0.0f64;
        for _ in 0..50 {
            let s = gen_box(&mut rng);
            let o = gen_box(&mut rng);
            let w = rng.gen_range(64.0..1024.0);
            let h = rng.gen_range(64.0..1024.0);

            // Per-box vector, written out from the definition.
            for b in [&s, &o] {
                let want = [
                    b.x / b.w,
                    b.y / b.h,
                    (b.x + b.w) / w,
                    (b.y + b.h) / h,
                    (b.w * b.h) / (w * h),
                ];
                let got = encode_entity_location(b, w, h).unwrap();
                for (g, e) in got.iter().zip(want) {
                    max_err = max_err.max((g - e).abs());
                }
            }

            // Pairwise vector: relative offsets both ways, log size ratios,
            // and the union box area.
            let ux = (s.x + s.w).max(o.x + o.w) - s.x.min(o.x);
            let uy = (s.y + s.h).max(o.y + o.h) - s.y.min(o.y);
            let want = [
                (s.x - o.x) / o.w,
                (s.y - o.y) / o.h,
                (s.w / o.w).ln(),
                (s.h / o.h).ln(),
                (o.x - s.x) / s.w,
                (o.y - s.y) / s.h,
                (o.w / s.w).ln(),
                (o.h / s.h).ln(),
                ux * uy / (w * h),
            ];
            let got = encode_pair_location(&s, &o, w, h).unwrap();
            for (g, e) in got.iter().zip(want) {
                max_err = max_err.max((g - e).abs());
            }
        }
        check!(max_err <= 1e-9, "max abs err {max_err:.3e} exceeds 1e-9");
        let elapsed = t0.elapsed();
        check!(
            elapsed <= Duration::from_secs(1),
            "took {elapsed:?}, budget 1s"
        );
        Ok(format!("50 box pairs, max abs err {max_err:.2e}"))
    });
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients of both losses against central finite differences.

#[test]
fn acceptance_2_gradient_checks() {
    report("[2/9] gradient checks", || {
        let t0 = Instant::now();
        let tol = 1e-3;
        let eps = 1e-6;
        let mut worst = 0.0f64;
        let mut n_checked = 0usize;

        // Contrastive prompt loss, w.r.t. context vectors and bias MLP.
        let enc = StubEncoder::new(StubEncoderConfig {
            seed: 21,
            token_dim: 16,
            embed_dim: 24,
            hash_space: 512,
        })
        .unwrap();
        let state = init_prompt_learner(PromptConfig {
            context_tokens: 4,
            embed_dim: 24,
            token_dim: 16,
            bias_hidden: 8,
            seed: 3,
        })
        .unwrap();
        let text = enc.encode_text("dog on grass").unwrap();
        let nu = seeded_unit_vector(77, 24);
        let mixed: Vec<f32> = text
            .to_f64()
            .iter()
            .zip(&nu)
            .map(|(t, n)| (0.6 * t + 0.8 * n) as f32)
            .collect();
        let sample = PromptSample {
            id: "grad0".into(),
            subject: "dog".into(),
            object: "grass".into(),
            u_img: EmbeddingVector::new(mixed).normalize().unwrap(),
            pseudo_txt: enc.encode_text("dog beside grass").unwrap(),
        };
        // Finite differences use the tape's f64 forward; the eager path
        // rounds the encoder output to f32, far coarser than eps.
        let f = |s: &crepe_core::prompt::PromptLearnerState| {
            sample_loss_grads(s, &enc, &sample).unwrap().loss
        };
        let grads = sample_loss_grads(&state, &enc, &sample).unwrap();
        for (r, c) in [
            (0usize, 0usize),
            (0, 9),
            (1, 4),
            (1, 15),
            (2, 2),
            (2, 11),
            (3, 6),
            (3, 13),
        ] {
            let mut plus = state.clone();
            plus.context[(r, c)] += eps;
            let mut minus = state.clone();
            minus.context[(r, c)] -= eps;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let e = rel_err(grads.d_context[(r, c)], numeric);
            check!(
                e <= tol,
                "contrastive d_context ({r},{c}): rel err {e:.2e}"
            );
            worst = worst.max(e);
            n_checked += 1;
        }
        for (arr, r, c) in [
            (0usize, 0usize, 0usize),
            (0, 11, 3),
            (0, 23, 7),
            (1, 0, 0),
            (1, 0, 5),
            (2, 0, 0),
            (2, 4, 9),
            (2, 7, 15),
            (3, 0, 2),
            (3, 0, 12),
        ] {
            let mut plus = state.clone();
            plus.bias.params_mut()[arr][(r, c)] += eps;
            let mut minus = state.clone();
            minus.bias.params_mut()[arr][(r, c)] -= eps;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let e = rel_err(grads.d_bias[arr][(r, c)], numeric);
            check!(
                e <= tol,
                "contrastive d_bias[{arr}] ({r},{c}): rel err {e:.2e}"
            );
            worst = worst.max(e);
            n_checked += 1;
        }
        let contrastive_coords = n_checked;
        check!(
            contrastive_coords >= 16,
            "only {contrastive_coords} contrastive coordinates checked"
        );

        // Head cross-entropy, one coordinate in every parameter array.
        let cfg = HeadConfig {
            embed_dim: 5,
            hidden_dim: 6,
            pred_dim: 4,
            loc_hidden: 8,
            loc_dim: 3,
            n_predicates: 3,
            seed: 9,
        };
        let head = init_head(cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let vec = |rng: &mut ChaCha20Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let mut batch = Vec::new();
        for (i, label) in [(0usize, 1usize), (1, 3), (2, 0)] {
            let mut loc = [0.0; 19];
            for v in &mut loc {
                *v = rng.gen_range(-1.0..1.0);
            }
            batch.push(HeadSample {
                id: format!("g{i}"),
                s: vec(&mut rng, 5),
                o: vec(&mut rng, 5),
                union: UnionFeature::Single(vec(&mut rng, 5)),
                loc,
                label,
            });
        }
        // Candidates route the attention scorer into the loss.
        batch[2].union =
            UnionFeature::Candidates((0..3).map(|_| vec(&mut rng, 5)).collect());

        let (_, grads) = batch_loss_and_grads(&head, &batch).unwrap();
        for idx in 0..HEAD_PARAM_COUNT {
            let (rows, cols) = head.params()[idx].dim();
            let coord = ((rows - 1) / 2, (cols - 1) / 2);
            let mut plus = head.clone();
            plus.params_mut()[idx][coord] += eps;
            let mut minus = head.clone();
            minus.params_mut()[idx][coord] -= eps;
            let numeric = (batch_loss_and_grads(&plus, &batch).unwrap().0
                - batch_loss_and_grads(&minus, &batch).unwrap().0)
                / (2.0 * eps);
            let e = rel_err(grads[idx][coord], numeric);
            check!(e <= tol, "head param {idx} at {coord:?}: rel err {e:.2e}");
            worst = worst.max(e);
            n_checked += 1;
        }
        let head_coords = n_checked - contrastive_coords;
        check!(head_coords >= 16, "only {head_coords} head coordinates checked");

        let elapsed = t0.elapsed();
        check!(
            elapsed <= Duration::from_secs(60),
            "took {elapsed:?}, budget 60s"
        );
        Ok(format!(
            "{contrastive_coords}+{head_coords} coordinates, worst rel err {worst:.2e}"
        ))
    });
}

// ---------------------------------------------------------------------------
// 3. Planted translational structure is recoverable by the trained head.

#[test]
fn acceptance_3_planted_structure_recovery() {
    report("[3/9] planted structure recovery", || {
        let _guard = heavy_lock();
        let t0 = Instant::now();
        let cfg = SyntheticConfig {
            n_scenes: 480,
            n_objects: 10,
            n_predicates: 20,
            embed_dim: 16,
            noise_sigma: 0.05,
            entities_per_scene: (5, 7),
            relations_per_scene: (4, 5),
            seed: 23,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        let n_relations: usize = data.scenes.iter().map(|s| s.relations.len()).sum();
        check!(
            n_relations >= 2000,
            "fixture has {n_relations} relations, need at least 2000"
        );

        let planted = materialize_planted(&data.scenes, &data.planted, 0xbeef).unwrap();
        let mut buckets: [Vec<HeadSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (i, p) in planted.into_iter().enumerate() {
            let part = if data.split.train.iter().any(|id| *id == p.image_id) {
                0
            } else if data.split.val.iter().any(|id| *id == p.image_id) {
                1
            } else {
                2
            };
            let scale = |v: Vec<f64>| v.into_iter().map(|x| 4.0 * x).collect();
            buckets[part].push(HeadSample {
                id: format!("{}:{i}", p.image_id),
                s: scale(p.s),
                o: scale(p.o),
                union: UnionFeature::Single(scale(p.u)),
                loc: p.loc,
                label: p.predicate_id,
            });
        }
        let [train, val, test] = buckets;
        check!(
            train.len() > 1200 && !val.is_empty() && test.len() > 200,
            "unexpected split sizes {}/{}/{}",
            train.len(),
            val.len(),
            test.len()
        );

        let head_cfg = HeadConfig {
            embed_dim: 16,
            hidden_dim: 64,
            pred_dim: 32,
            loc_hidden: 32,
            loc_dim: 16,
            n_predicates: 20,
            seed: 1,
        };
        let train_cfg = HeadTrainConfig {
            epochs: 60,
            batch_size: 16,
            momentum: 0.9,
            seed: 2,
        };
        let state = init_head(head_cfg).unwrap();
        let (trained, _) = train_head(state, &train, &val, &train_cfg, |_, _| Ok(())).unwrap();
        let acc = accuracy(&trained, &test).unwrap();
        check!(acc >= 0.95, "held-out top-1 accuracy {acc:.4} below 0.95");

        let elapsed = t0.elapsed();
        check!(
            elapsed <= Duration::from_secs(300),
            "took {elapsed:?}, budget 5 min"
        );
        Ok(format!(
            "{n_relations} relations, 20 predicates, held-out top-1 {acc:.4} in {:.0?}",
            elapsed
        ))
    });
}

// ---------------------------------------------------------------------------
// 4. Contrastive prompt training beats the retrieved negative.

#[test]
fn acceptance_4_contrastive_efficacy() {
    report("[4/9] contrastive prompt efficacy", || {
        let _guard = heavy_lock();
        let t0 = Instant::now();
        let enc = StubEncoder::new(StubEncoderConfig {
            seed: 21,
            token_dim: 16,
            embed_dim: 24,
            hash_space: 512,
        })
        .unwrap();

        let subjects = ["dog", "cat", "horse", "bird", "car", "man", "cup", "tree"];
        let predicates = ["on", "under", "beside", "above", "near", "riding"];
        let objects = ["grass", "table", "fence", "sky", "house", "road", "sofa", "hill"];
        let samples: Vec<PromptSample> = (0..16)
            .map(|i| {
                let s = subjects[i % 8];
                let p = predicates[i % 6];
                let o = objects[(i * 3) % 8];
                let text = format!("{s} {p} {o}");
                let t = enc.encode_text(&text).unwrap();
                let nu = seeded_unit_vector(2000 + i as u64, 24);
                let mixed: Vec<f32> = t
                    .to_f64()
                    .iter()
                    .zip(&nu)
                    .map(|(ti, ni)| (0.5 * ti + 0.75f64.sqrt() * ni) as f32)
                    .collect();
                PromptSample {
                    id: format!("toy{i}"),
                    subject: s.to_string(),
                    object: o.to_string(),
                    u_img: EmbeddingVector::new(mixed).normalize().unwrap(),
                    pseudo_txt: t,
                }
            })
            .collect();

        let state = init_prompt_learner(PromptConfig {
            context_tokens: 4,
            embed_dim: 24,
            token_dim: 16,
            bias_hidden: 16,
            seed: 3,
        })
        .unwrap();
        let initial = mean_loss(&state, &enc, &samples).unwrap();
        let cfg = PromptTrainConfig {
            epochs: 6000,
            learning_rate: 1e-2,
            batch_size: 4,
            seed: 11,
        };
        let (trained, _) = train_prompt_learner(state, &enc, &samples, &cfg, |_, _| Ok(())).unwrap();
        let final_loss = mean_loss(&trained, &enc, &samples).unwrap();
        let sep = separation_rate(&trained, &enc, &samples).unwrap();

        check!(
            final_loss < initial,
            "mean loss did not descend: {initial:.4} -> {final_loss:.4}"
        );
        check!(
            sep >= 0.9,
            "text feature beats the retrieved negative on only {:.0}% of samples",
            sep * 100.0
        );
        let elapsed = t0.elapsed();
        check!(
            elapsed <= Duration::from_secs(300),
            "took {elapsed:?}, budget 5 min"
        );
        Ok(format!(
            "mean loss {initial:.4} -> {final_loss:.4}, separation {:.0}% in {:.0?}",
            sep * 100.0,
            elapsed
        ))
    });
}

// ---------------------------------------------------------------------------
// 5. Ranking metric equals a from-scratch implementation, exactly.

fn brute_force_mean_recall(scenes: &[ScenePredictions], n_predicates: usize, k: usize) -> f64 {
    let mut recalls = Vec::new();
    for p in 0..n_predicates {
        let mut total = 0usize;
        let mut hit = 0usize;
        for scene in scenes {
            let top: Vec<(usize, usize, usize)> = scene
                .ranked
                .iter()
                .take(k)
                .map(|t| (t.subject_idx, t.object_idx, t.predicate_id))
                .collect();
            for gt in &scene.gt {
                if gt.2 == p {
                    total += 1;
                    if top.contains(gt) {
                        hit += 1;
                    }
                }
            }
        }
        if total > 0 {
            recalls.push(hit as f64 / total as f64);
        }
    }
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[test]
fn acceptance_5_metric_oracle() {
    report("[5/9] mean-recall metric oracle", || {
        let mut rng = ChaCha20Rng::seed_from_u64(4242);
        let mut instances = 0usize;
        while instances < 200 {
            let n_predicates = rng.gen_range(1..=5);
            let n_scenes = rng.gen_range(1..=3);
            let scenes: Vec<ScenePredictions> = (0..n_scenes)
                .map(|_| {
                    let ranked = (0..rng.gen_range(0..=12))
                        .map(|_| RankedTriplet {
                            subject_idx: rng.gen_range(0..4),
                            object_idx: rng.gen_range(0..4),
                            predicate_id: rng.gen_range(0..n_predicates),
                            score: rng.gen_range(0.0..1.0),
                        })
                        .collect();
                    let gt = (0..rng.gen_range(0..=6))
                        .map(|_| {
                            (
                                rng.gen_range(0..4),
                                rng.gen_range(0..4),
                                rng.gen_range(0..n_predicates),
                            )
                        })
                        .collect();
                    ScenePredictions { ranked, gt }
                })
                .collect();

            for k in [1usize, 2, 3, 5, 10] {
                let got = mean_recall_at_k(&scenes, n_predicates, k);
                let want = brute_force_mean_recall(&scenes, n_predicates, k);
                check!(
                    got == want,
                    "instance {instances} k={k}: metric {got} != brute force {want}"
                );
            }
            let series: Vec<f64> = (1..=12)
                .map(|k| mean_recall_at_k(&scenes, n_predicates, k))
                .collect();
            for w in series.windows(2) {
                check!(
                    w[0] <= w[1],
                    "instance {instances}: mean recall not monotone in K: {series:?}"
                );
            }
            instances += 1;
        }
        Ok(format!(
            "{instances} random instances, exact equality at 5 depths, monotone over K=1..12"
        ))
    });
}

// ---------------------------------------------------------------------------
// 6. Calibration recovers rare-class recall and never disturbs uniform runs.

#[test]
fn acceptance_6_calibration_efficacy() {
    report("[6/9] calibration efficacy", || {
        let priors = [0.9, 0.05, 0.05];
        let lift = 2.5;
        let jitter = 0.05;
        let mut rng = ChaCha20Rng::seed_from_u64(555);

        // Predictor whose softmax is tilted by the class prior: rare true
        // classes still lose the argmax to the frequent class.
        let biased = |rng: &mut ChaCha20Rng, true_class: usize| {
            let mut probs: Vec<f64> = priors
                .iter()
                .enumerate()
                .map(|(k, pr)| {
                    let l = if k == true_class { lift } else { 1.0 };
                    pr * l * (jitter * rng.gen_range(-1.0..1.0f64)).exp()
                })
                .collect();
            probs.push(0.0);
            let z: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= z;
            }
            PredicateDistribution { probs }
        };
        let draw_class = |rng: &mut ChaCha20Rng| -> usize {
            let t = rng.gen_range(0.0..1.0);
            if t < 0.9 {
                0
            } else if t < 0.95 {
                1
            } else {
                2
            }
        };

        let val: Vec<(PredicateDistribution, usize)> = (0..400)
            .map(|_| {
                let c = draw_class(&mut rng);
                (biased(&mut rng, c), c)
            })
            .collect();
        let table = estimate_frequencies(&val).unwrap();
        check!(
            table.floored.is_empty(),
            "fixture left classes without validation examples: {:?}",
            table.floored
        );

        let argmax = |scores: &[f64]| -> usize {
            let mut best = 0;
            for (i, v) in scores.iter().enumerate().take(3) {
                if *v > scores[best] {
                    best = i;
                }
            }
            best
        };
        let mut per_class = [[0usize; 2]; 3];
        for c in 0..3 {
            for _ in 0..50 {
                let d = biased(&mut rng, c);
                if argmax(&d.probs) == c {
                    per_class[c][0] += 1;
                }
                if argmax(&adjust(&d, &table).unwrap()) == c {
                    per_class[c][1] += 1;
                }
            }
        }
        let mean_recall = |which: usize| -> f64 {
            per_class.iter().map(|h| h[which] as f64 / 50.0).sum::<f64>() / 3.0
        };
        let uncal = mean_recall(0);
        let cal = mean_recall(1);
        check!(
            cal >= uncal,
            "calibration hurt mean per-class recall@1: {uncal:.3} -> {cal:.3}"
        );
        check!(
            uncal <= 0.5 && cal >= 0.8,
            "fixture exercises nothing: recall {uncal:.3} -> {cal:.3}"
        );

        // Uniform estimates must leave every argmax untouched.
        let uniform = CalibrationTable {
            betas: vec![0.37; 6],
            floored: vec![],
        };
        let full_argmax = |scores: &[f64]| -> usize {
            let mut best = 0;
            for (i, v) in scores.iter().enumerate().take(6) {
                if *v > scores[best] {
                    best = i;
                }
            }
            best
        };
        for i in 0..1000 {
            let mut probs: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= z;
            }
            let d = PredicateDistribution { probs };
            let scores = adjust(&d, &uniform).unwrap();
            check!(
                full_argmax(&scores) == full_argmax(&d.probs),
                "uniform estimates moved the argmax on distribution {i}"
            );
        }
        Ok(format!(
            "mean per-class recall@1 {uncal:.3} -> {cal:.3}; 1000 uniform adjustments argmax-stable"
        ))
    });
}

// ---------------------------------------------------------------------------
// 7. Union feature ablations order as expected on a text-informative fixture.

fn ablation_config(out_dir: &Path, cache_dir: &Path, mode: &str, k: usize) -> PipelineConfig {
    PipelineConfig {
        out_dir: out_dir.to_path_buf(),
        seed: 7,
        mode: mode.into(),
        pseudo_k: k,
        dataset: DatasetConfig {
            n_scenes: 200,
            n_objects: 10,
            n_predicates: 6,
            entities_per_scene: [3, 5],
            relations_per_scene: [2, 4],
            pair_affinity: 0.0,
            union_alignment: 0.8,
            entity_alignment: 0.2,
            ..DatasetConfig::default()
        },
        encoder: EncoderConfig {
            seed: 5,
            token_dim: 16,
            embed_dim: 32,
            hash_space: 2048,
            cache_dir: Some(cache_dir.to_path_buf()),
        },
        // The prompt budget is the expensive part: the learned-prompt leg
        // only pulls ahead of the discrete pseudo-labels once the bias MLP
        // has had enough steps to differentiate by image content.
        prompt: PromptStageConfig {
            context_tokens: 4,
            bias_hidden: 24,
            epochs: 3000,
            learning_rate: 3e-2,
            batch_size: 32,
        },
        head: HeadStageConfig {
            hidden_dim: 48,
            pred_dim: 24,
            loc_hidden: 32,
            loc_dim: 16,
            epochs: 60,
            batch_size: 16,
            momentum: 0.9,
            no_relation_ratio: 1.0,
            feature_scale: 4.0,
        },
    }
}

#[test]
fn acceptance_7_ablation_ordering() {
    report("[7/9] ablation ordering at mR@20", || {
        let _guard = heavy_lock();
        let t0 = Instant::now();
        let root = tempfile::tempdir().unwrap();
        let cache = root.path().join("cache");

        let mut mr20 = BTreeMap::new();
        for (mode, k) in [
            ("visual", 1usize),
            ("visual-language", 1),
            ("pseudo-k", 3),
            ("crepe", 1),
        ] {
            let out = root.path().join(mode);
            let cfg = ablation_config(&out, &cache, mode, k);
            run_all(&cfg).unwrap();
            let report = load_report(&out, artifact::REPORT).unwrap();
            mr20.insert(mode.to_string(), report.mean_recall[&20]);
        }

        let v = mr20["visual"];
        let vl = mr20["visual-language"];
        let pk = mr20["pseudo-k"];
        let cr = mr20["crepe"];
        check!(
            v < vl && vl < pk && pk < cr,
            "ordering violated: visual {v:.4}, visual-language {vl:.4}, \
             pseudo-k {pk:.4}, crepe {cr:.4}"
        );
        Ok(format!(
            "mR@20 visual {v:.3} < visual-language {vl:.3} < pseudo-k {pk:.3} < crepe {cr:.3} in {:.0?}",
            t0.elapsed()
        ))
    });
}

// ---------------------------------------------------------------------------
// 8. The alternating learning-rate schedule shows up in the recorded trace.

#[test]
fn acceptance_8_schedule_probe() {
    report("[8/9] learning-rate schedule probe", || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            out_dir: dir.path().to_path_buf(),
            seed: 7,
            mode: "visual".into(),
            pseudo_k: 1,
            dataset: DatasetConfig {
                n_scenes: 10,
                n_objects: 4,
                n_predicates: 2,
                entities_per_scene: [3, 4],
                relations_per_scene: [1, 2],
                ..DatasetConfig::default()
            },
            encoder: EncoderConfig {
                seed: 5,
                token_dim: 8,
                embed_dim: 12,
                hash_space: 256,
                cache_dir: None,
            },
            prompt: PromptStageConfig::default(),
            head: HeadStageConfig {
                hidden_dim: 8,
                pred_dim: 8,
                loc_hidden: 8,
                loc_dim: 4,
                epochs: 46,
                batch_size: 32,
                ..HeadStageConfig::default()
            },
        };
        run_all(&cfg).unwrap();

        let trace = std::fs::read_to_string(dir.path().join(artifact::HEAD_TRACE)).unwrap();
        let mut lr_by_epoch = BTreeMap::new();
        for line in trace.lines().skip(1) {
            let mut cols = line.split(',');
            let epoch: usize = cols.next().unwrap().parse().unwrap();
            let lr: f64 = cols.next().unwrap().parse().unwrap();
            lr_by_epoch.insert(epoch, lr);
        }
        check!(
            lr_by_epoch.len() == 46,
            "trace has {} epochs, expected 46",
            lr_by_epoch.len()
        );
        let probe = (
            lr_by_epoch[&15],
            lr_by_epoch[&16],
            lr_by_epoch[&31],
            lr_by_epoch[&46],
        );
        check!(
            probe == (1e-3, 1e-4, 1e-3, 1e-4),
            "recorded rates at epochs 15/16/31/46 were {probe:?}"
        );
        Ok("epochs 15/16/31/46 at 1e-3/1e-4/1e-3/1e-4".into())
    });
}

// ---------------------------------------------------------------------------
// 9. Training and evaluation are bit-reproducible under a fixed seed.

#[test]
fn acceptance_9_determinism() {
    report("[9/9] bit-level determinism", || {
        let _guard = heavy_lock();
        let make = |out: &Path| PipelineConfig {
            out_dir: out.to_path_buf(),
            seed: 13,
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
                epochs: 4,
                ..PromptStageConfig::default()
            },
            head: HeadStageConfig {
                hidden_dim: 16,
                pred_dim: 12,
                loc_hidden: 8,
                loc_dim: 4,
                epochs: 5,
                batch_size: 16,
                ..HeadStageConfig::default()
            },
        };

        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_all(&make(a.path())).unwrap();
        run_all(&make(b.path())).unwrap();

        let artifacts = [
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
            artifact::BASELINE_PREDICTIONS,
            artifact::BASELINE_REPORT,
            artifact::BASELINE_MEAN_RECALL_CSV,
            artifact::BASELINE_PER_PREDICATE_CSV,
        ];
        for rel in artifacts {
            let x = std::fs::read(a.path().join(rel)).unwrap();
            let y = std::fs::read(b.path().join(rel)).unwrap();
            check!(x == y, "{rel} differs between identically seeded runs");
        }
        Ok(format!(
            "{} artifacts byte-identical across fresh directories",
            artifacts.len()
        ))
    });
}
