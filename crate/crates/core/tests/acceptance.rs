//! Acceptance suite: the eight numbered release gates for this project,
//! one test per gate, each printing a single PASS line with its measured
//! numbers (visible under `--nocapture`).
//!
//! Gates 4 and 5 share one expensive fixture — a 4 mechanisms × 5 seeds
//! training sweep on the default synthetic benchmark — built once behind a
//! `OnceLock`. Everything else runs from scratch in seconds.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gemr_core::align::{
    estimate_similarity, warp_to_template, AlignConfig, Similarity, TEMPLATE,
    TEMPLATE_HEIGHT, TEMPLATE_WIDTH,
};
use gemr_core::attention::{pool_eval, MechanismKind, PoolOptions, PoolParams};
use gemr_core::checkpoint::{load, save, CheckpointError, CheckpointMeta};
use gemr_core::data::{
    bayes_oracle_accuracy, generate_dataset, read_partition, DataError, Dataset, DatasetConfig,
    GroupSample, OracleEstimate,
};
use gemr_core::encoder::LinearLayer;
use gemr_core::gradcheck::{check_model_gradients, GradCheckConfig};
use gemr_core::model::{ensemble_predict, GroupEmotionModel, Label, ModelConfig};
use gemr_core::pnm::{read_pnm, write_pnm, Image, PnmError};
use gemr_core::train::{evaluate, lr_schedule, train, TrainConfig};
use gemr_core::{CounterRng, Shape, Tensor};

/// Monte-Carlo re-measurement of the salience oracle must confirm this
/// pinned accuracy before it is used as the benchmark's upper bound.
const PINNED_ORACLE: f64 = 0.967;
const DATASET_SEED: u64 = 42;
const TRAIN_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// ---------------------------------------------------------------------
// Shared fixture: the full benchmark sweep (criteria 4 and 5).
// ---------------------------------------------------------------------

struct Experiment {
    eval: Vec<GroupSample>,
    oracle: OracleEstimate,
    /// Per mechanism, EVAL accuracy for each training seed.
    accuracies: Vec<(MechanismKind, Vec<f64>)>,
    /// The five AttentionC members, in seed order.
    c_models: Vec<GroupEmotionModel>,
    train_elapsed: Duration,
}

static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();

/// Matches the trainer CLI: the parameter-init seed is derived from the
/// run seed on a stream disjoint from the shuffle (0) and dropout (1)
/// streams, so one seed pins the entire run.
fn init_seed(run_seed: u64) -> u64 {
    CounterRng::new(run_seed).stream(2).next_u64()
}

fn run_benchmark() -> Experiment {
    let cfg = DatasetConfig { seed: DATASET_SEED, ..DatasetConfig::default() };
    let data: Dataset = generate_dataset(&cfg).expect("default config is valid");
    let oracle = bayes_oracle_accuracy(&cfg, 50_000).expect("oracle estimate");

    let g_dim = data.train[0].global_context.len();
    let f_dim = data.train[0].faces[0].len();
    let started = Instant::now();
    let mut accuracies = Vec::new();
    let mut c_models = Vec::new();
    for kind in MechanismKind::ALL {
        let mut per_seed = Vec::new();
        for &seed in &TRAIN_SEEDS {
            let t0 = Instant::now();
            let config = ModelConfig::for_mechanism(kind, g_dim, f_dim);
            let model = GroupEmotionModel::init(config, init_seed(seed)).expect("valid config");
            let train_cfg = TrainConfig { seed, ..TrainConfig::default() };
            let outcome = train(model, &train_cfg, &data.train, &[], |_| {}).expect("training");
            let acc = evaluate(&outcome.model, &data.eval).expect("evaluation").overall;
            eprintln!(
                "  benchmark: {kind} seed {seed} -> eval accuracy {acc:.4} ({:.1} s)",
                t0.elapsed().as_secs_f64()
            );
            per_seed.push(acc);
            if kind == MechanismKind::AttentionC {
                c_models.push(outcome.model);
            }
        }
        accuracies.push((kind, per_seed));
    }

    Experiment {
        eval: data.eval,
        oracle,
        accuracies,
        c_models,
        train_elapsed: started.elapsed(),
    }
}

fn experiment() -> &'static Experiment {
    EXPERIMENT.get_or_init(run_benchmark)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------
// Criterion 1 — gradient correctness.
// ---------------------------------------------------------------------

/// End-to-end loss gradients for every parameter group of all four
/// mechanisms must match a 64-bit central-difference oracle (h = 1e-3,
/// fallback 1e-4) within 1e-4 relative error, over at least 20 random
/// configurations with 1–6 faces, in under two minutes.
#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let cfg = GradCheckConfig::default();
    assert!(cfg.configs >= 20, "suite must cover at least 20 configurations");
    assert_eq!(cfg.tolerance, 1e-4);

    let report = check_model_gradients(&cfg).expect("gradient check runs");
    let elapsed = started.elapsed();

    assert!(report.passed(), "gradient check failed:\n{}", report.summary());
    assert_eq!(report.configs_checked, cfg.configs);
    for (kind, err) in &report.per_mechanism {
        assert!(*err < cfg.tolerance, "{kind}: worst relative error {err:.3e}");
    }
    // The oracle may recuse coordinates whose two step sizes disagree with
    // each other, but only rarely — otherwise the suite verifies nothing.
    assert!(
        report.skipped_ill_conditioned * 50 <= report.coordinates_checked,
        "{} of {} coordinates skipped",
        report.skipped_ill_conditioned,
        report.coordinates_checked
    );
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}, budget is 2 minutes");

    println!(
        "criterion 1: PASS — {} coordinates across {} configs, worst relative error {:.3e} \
         (tolerance 1e-4, {} skipped, {:.1} s)",
        report.coordinates_checked,
        report.configs_checked,
        report.worst.relative_error,
        report.skipped_ill_conditioned,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 2 — permutation invariance of class probabilities.
// ---------------------------------------------------------------------

/// 100 random samples × 10 random face permutations per mechanism:
/// eval-mode class probabilities may move by less than 1e-6, in under 30 s.
#[test]
fn criterion_2_probabilities_are_permutation_invariant() {
    let started = Instant::now();
    let mut worst = 0.0f32;
    let mut comparisons = 0usize;

    for (m, kind) in MechanismKind::ALL.into_iter().enumerate() {
        let config = ModelConfig::for_mechanism(kind, 12, 11);
        let model = GroupEmotionModel::init(config, 0xC2 + m as u64).expect("valid config");
        let root = CounterRng::new(0x9e37_79b9 ^ m as u64);

        for i in 0..100u64 {
            let mut rng = root.stream(i);
            let n_faces = 1 + rng.next_below(6);
            let sample = GroupSample {
                id: format!("perm-{i}"),
                global_context: (0..12).map(|_| rng.next_symmetric(2.0) as f32).collect(),
                faces: (0..n_faces)
                    .map(|_| (0..11).map(|_| rng.next_symmetric(2.0) as f32).collect())
                    .collect(),
                label: Label::from_index(rng.next_below(3)).expect("index < 3"),
                dominant_index: None,
            };
            let (base, _) = model.forward(&sample).expect("forward");

            let mut order: Vec<usize> = (0..n_faces).collect();
            for _ in 0..10 {
                rng.shuffle(&mut order);
                let permuted = GroupSample {
                    faces: order.iter().map(|&j| sample.faces[j].clone()).collect(),
                    ..sample.clone()
                };
                let (probs, _) = model.forward(&permuted).expect("forward");
                for (a, b) in base.values.iter().zip(probs.values) {
                    worst = worst.max((a - b).abs());
                }
                comparisons += 1;
            }
        }
    }
    let elapsed = started.elapsed();

    assert_eq!(comparisons, 4 * 100 * 10);
    assert!(worst < 1e-6, "probabilities moved by {worst:.3e} under a face permutation");
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}, budget is 30 s");

    println!(
        "criterion 2: PASS — {comparisons} permuted forwards, worst probability shift {worst:.3e} \
         (tolerance 1e-6, {:.1} s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 3 — degeneracy equivalences.
// ---------------------------------------------------------------------

/// Single-face pooling is exactly the identity; identical faces make all
/// four mechanisms agree within 1e-6; AttentionB collapses to Average with
/// a zero projection and to AttentionA with an identity projection.
#[test]
fn criterion_3_degenerate_configurations_collapse_to_known_forms() {
    let opts = PoolOptions::default();
    let root = CounterRng::new(0xDE6E);
    let trials = 50usize;

    // (a) One face: the pooled vector is that face, bit for bit — the
    // single softmax weight is exactly 1.
    for t in 0..trials {
        let mut rng = root.stream(t as u64);
        let d = 2 + rng.next_below(5);
        let face: Vec<f64> = (0..d).map(|_| rng.next_symmetric(3.0)).collect();
        let f = Tensor::from_rows(&[face.clone()]).unwrap();
        let g = Tensor::vector((0..d).map(|_| rng.next_symmetric(2.0)).collect()).unwrap();
        for kind in MechanismKind::ALL {
            let params = PoolParams::<f64>::init(kind, d, d, 8, &mut rng);
            let ctx = kind.needs_context().then_some(&g);
            let (pooled, weights) = pool_eval(&f, ctx, &params, &opts).unwrap();
            assert_eq!(pooled.data(), face.as_slice(), "{kind}: single face not exact");
            assert_eq!(weights.data(), &[1.0], "{kind}: single weight not exactly 1");
        }
    }

    // (b) Identical faces: every mechanism pools to (numerically) the same
    // vector regardless of its weights.
    let mut worst_identical = 0.0f64;
    for t in 0..trials {
        let mut rng = root.stream(1000 + t as u64);
        let d = 2 + rng.next_below(5);
        let n = 2 + rng.next_below(5);
        let face: Vec<f64> = (0..d).map(|_| rng.next_symmetric(3.0)).collect();
        let f = Tensor::from_rows(&vec![face.clone(); n]).unwrap();
        let g = Tensor::vector((0..d).map(|_| rng.next_symmetric(2.0)).collect()).unwrap();
        let pooled: Vec<Tensor<f64>> = MechanismKind::ALL
            .into_iter()
            .map(|kind| {
                let params = PoolParams::<f64>::init(kind, d, d, 8, &mut rng);
                let ctx = kind.needs_context().then_some(&g);
                pool_eval(&f, ctx, &params, &opts).unwrap().0
            })
            .collect();
        for other in &pooled[1..] {
            worst_identical = worst_identical.max(pooled[0].max_abs_diff(other));
        }
    }
    assert!(
        worst_identical < 1e-6,
        "identical faces: mechanisms disagree by {worst_identical:.3e}"
    );

    // (c) AttentionB with an all-zero projection scores every face
    // identically, which is exactly Average.
    let mut worst_zero = 0.0f64;
    // (d) AttentionB with an identity projection (D_g = D_f) passes the
    // query through untouched, which is exactly AttentionA.
    let mut worst_identity = 0.0f64;
    for t in 0..trials {
        let mut rng = root.stream(2000 + t as u64);
        let d = 2 + rng.next_below(5);
        let n = 1 + rng.next_below(6);
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.next_symmetric(3.0)).collect()).collect();
        let f = Tensor::from_rows(&rows).unwrap();
        let g = Tensor::vector((0..d).map(|_| rng.next_symmetric(2.0)).collect()).unwrap();

        let zero_proj = PoolParams::AttentionB {
            proj: LinearLayer {
                weight: Tensor::zeros(Shape::Matrix(d, d)),
                bias: Tensor::zeros(Shape::Vector(d)),
            },
        };
        let (b_zero, _) = pool_eval(&f, Some(&g), &zero_proj, &opts).unwrap();
        let (avg, _) = pool_eval(&f, None, &PoolParams::Average, &opts).unwrap();
        worst_zero = worst_zero.max(b_zero.max_abs_diff(&avg));

        let mut eye = vec![0.0f64; d * d];
        for k in 0..d {
            eye[k * d + k] = 1.0;
        }
        let identity_proj = PoolParams::AttentionB {
            proj: LinearLayer {
                weight: Tensor::matrix(d, d, eye).unwrap(),
                bias: Tensor::zeros(Shape::Vector(d)),
            },
        };
        let (b_eye, _) = pool_eval(&f, Some(&g), &identity_proj, &opts).unwrap();
        let (a, _) = pool_eval(&f, Some(&g), &PoolParams::AttentionA, &opts).unwrap();
        worst_identity = worst_identity.max(b_eye.max_abs_diff(&a));
    }
    assert!(worst_zero < 1e-6, "zero-projection B differs from Average by {worst_zero:.3e}");
    assert!(
        worst_identity < 1e-6,
        "identity-projection B differs from AttentionA by {worst_identity:.3e}"
    );

    println!(
        "criterion 3: PASS — single face exact over {trials} draws; identical-face spread \
         {worst_identical:.3e}; B(0)=Average within {worst_zero:.3e}; B(I)=AttentionA within \
         {worst_identity:.3e} (tolerance 1e-6)"
    );
}

// ---------------------------------------------------------------------
// Criterion 4 — planted-salience benchmark ordering.
// ---------------------------------------------------------------------

/// On the default synthetic benchmark, averaged over 5 seeds with the
/// standard regime (batch 32, lr 0.001, decay every 9 epochs, 27 epochs):
/// AttentionC ≥ Average + 5 points, AttentionB ≥ Average + 2 points,
/// AttentionA ≥ Average − 1 point, and every model stays below the pinned
/// salience-oracle accuracy + 1 point. Under 15 minutes.
#[test]
fn criterion_4_attention_orders_the_planted_salience_benchmark() {
    let exp = experiment();

    // Re-validate the pinned oracle constant before using it as a cap.
    assert!(
        (exp.oracle.accuracy - PINNED_ORACLE).abs() < 0.005,
        "oracle drifted: measured {:.4} ± {:.4} vs pinned {PINNED_ORACLE}",
        exp.oracle.accuracy,
        exp.oracle.ci_half_width
    );
    let cap = PINNED_ORACLE + 0.01;

    let acc_of = |kind: MechanismKind| -> &[f64] {
        &exp.accuracies.iter().find(|(k, _)| *k == kind).expect("all mechanisms ran").1
    };
    let avg = mean(acc_of(MechanismKind::Average));
    let a = mean(acc_of(MechanismKind::AttentionA));
    let b = mean(acc_of(MechanismKind::AttentionB));
    let c = mean(acc_of(MechanismKind::AttentionC));

    assert!(c >= avg + 0.05, "AttentionC {c:.4} is not 5 points above Average {avg:.4}");
    assert!(b >= avg + 0.02, "AttentionB {b:.4} is not 2 points above Average {avg:.4}");
    assert!(a >= avg - 0.01, "AttentionA {a:.4} fell more than 1 point below Average {avg:.4}");
    for (kind, accs) in &exp.accuracies {
        for (seed, acc) in TRAIN_SEEDS.iter().zip(accs) {
            assert!(
                *acc <= cap,
                "{kind} seed {seed}: accuracy {acc:.4} exceeds the oracle cap {cap:.3}"
            );
        }
    }
    assert!(
        exp.train_elapsed < Duration::from_secs(900),
        "sweep took {:?}, budget is 15 minutes",
        exp.train_elapsed
    );

    println!(
        "criterion 4: PASS — mean EVAL accuracy over 5 seeds: average {avg:.4}, A {a:.4}, \
         B {b:.4}, C {c:.4}; oracle {:.4} ± {:.4} (pinned {PINNED_ORACLE}, cap {cap:.3}); \
         sweep {:.0} s",
        exp.oracle.accuracy,
        exp.oracle.ci_half_width,
        exp.train_elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 5 — ensemble gain.
// ---------------------------------------------------------------------

/// The 5-seed AttentionC ensemble must score at least the mean of its
/// members and within 0.5 points of the best member, and its probabilities
/// must equal the component-wise mean of member probabilities within 1e-6.
#[test]
fn criterion_5_ensemble_beats_its_members() {
    let exp = experiment();
    let members = &exp.c_models;
    assert_eq!(members.len(), 5);
    let member_accs =
        &exp.accuracies.iter().find(|(k, _)| *k == MechanismKind::AttentionC).unwrap().1;

    let mut hits = 0usize;
    let mut worst_offline = 0.0f32;
    for sample in &exp.eval {
        let probs = ensemble_predict(members, sample).expect("ensemble forward");

        // Offline oracle: average the members' probability vectors by hand.
        let mut offline = [0.0f32; 3];
        for m in members {
            let (p, _) = m.forward(sample).expect("member forward");
            for (acc, v) in offline.iter_mut().zip(p.values) {
                *acc += v;
            }
        }
        for (acc, got) in offline.iter_mut().zip(probs.values) {
            *acc /= members.len() as f32;
            worst_offline = worst_offline.max((*acc - got).abs());
        }

        if probs.predict() == sample.label {
            hits += 1;
        }
    }
    let ensemble_acc = hits as f64 / exp.eval.len() as f64;
    let member_mean = mean(member_accs);
    let member_best = member_accs.iter().cloned().fold(f64::MIN, f64::max);

    assert!(
        worst_offline < 1e-6,
        "ensemble probabilities deviate from the member mean by {worst_offline:.3e}"
    );
    assert!(
        ensemble_acc >= member_mean,
        "ensemble {ensemble_acc:.4} is below the member mean {member_mean:.4}"
    );
    assert!(
        ensemble_acc >= member_best - 0.005,
        "ensemble {ensemble_acc:.4} is more than 0.5 points below the best member {member_best:.4}"
    );

    println!(
        "criterion 5: PASS — ensemble {ensemble_acc:.4} vs member mean {member_mean:.4} / best \
         {member_best:.4}; probability averaging matches the offline oracle within \
         {worst_offline:.3e} (tolerance 1e-6)"
    );
}

// ---------------------------------------------------------------------
// Criterion 6 — alignment.
// ---------------------------------------------------------------------

/// 200 random exact similarities of the template landmarks are recovered
/// with parameter error < 1e-6 and no reflection; warped output is always
/// exactly 96×112; rendering a scene through a known transform and aligning
/// it back restores interior pixels with mean error < 5 levels. Under 10 s.
#[test]
fn criterion_6_alignment_recovers_similarities_and_restores_pixels() {
    let started = Instant::now();
    let cfg = AlignConfig::default();
    let root = CounterRng::new(0xA119);

    // (a) Exact landmark recovery over 200 random transforms.
    let mut worst_param = 0.0f64;
    for t in 0..200u64 {
        let mut rng = root.stream(t);
        let scale = 0.4 + 2.1 * rng.next_f64();
        let theta = rng.next_symmetric(std::f64::consts::PI);
        let want = Similarity {
            a: scale * theta.cos(),
            b: scale * theta.sin(),
            tx: rng.next_symmetric(40.0),
            ty: rng.next_symmetric(40.0),
        };
        let inv = want.inverse().unwrap();
        let mut src = TEMPLATE;
        for p in src.points.iter_mut() {
            *p = inv.apply(p.0, p.1);
        }
        let got = estimate_similarity(&src, &cfg).unwrap();
        for (g, w) in [(got.a, want.a), (got.b, want.b), (got.tx, want.tx), (got.ty, want.ty)] {
            worst_param = worst_param.max((g - w).abs());
        }
        assert!(
            got.a * got.a + got.b * got.b > 0.0,
            "recovered transform has a non-positive determinant"
        );
    }
    assert!(worst_param < 1e-6, "worst recovered parameter error {worst_param:.3e}");

    // (b, c) Render a smooth scene through a known transform, align it
    // back, and compare interior pixels against the scene itself.
    let pattern = |x: f64, y: f64| -> f64 {
        127.5
            + 60.0
                * (x * std::f64::consts::TAU / 48.0).sin()
                * (y * std::f64::consts::TAU / 56.0).cos()
            + 0.3 * x
            + 0.2 * y
            - 30.0
    };
    let mut worst_mean_err = 0.0f64;
    for t in 0..20u64 {
        let mut rng = root.stream(1000 + t);
        // Template-to-source map: scale up into a 300×300 source so the
        // whole template frame lands inside it with margin.
        let k = 1.2 + 0.6 * rng.next_f64();
        let theta = rng.next_symmetric(0.3);
        let (a, b) = (k * theta.cos(), k * theta.sin());
        let cx = 150.0 + rng.next_symmetric(8.0);
        let cy = 150.0 + rng.next_symmetric(8.0);
        let to_source = Similarity {
            a,
            b,
            tx: cx - (a * 48.0 - b * 56.0),
            ty: cy - (b * 48.0 + a * 56.0),
        };
        let to_template = to_source.inverse().unwrap();

        let mut source = Image::new(300, 300, 1).unwrap();
        for v in 0..300 {
            for u in 0..300 {
                let (x, y) = to_template.apply(u as f64, v as f64);
                source.set(u, v, 0, pattern(x, y).round().clamp(0.0, 255.0) as u8);
            }
        }
        let mut landmarks = TEMPLATE;
        for p in landmarks.points.iter_mut() {
            *p = to_source.apply(p.0, p.1);
        }
        let est = estimate_similarity(&landmarks, &cfg).unwrap();
        let aligned = warp_to_template(&source, &est).unwrap();
        assert_eq!(
            (aligned.width, aligned.height),
            (TEMPLATE_WIDTH, TEMPLATE_HEIGHT),
            "aligned output is not 96×112"
        );

        let margin = 8usize;
        let mut err_sum = 0.0f64;
        let mut count = 0usize;
        for y in margin..TEMPLATE_HEIGHT - margin {
            for x in margin..TEMPLATE_WIDTH - margin {
                let truth = pattern(x as f64, y as f64).round().clamp(0.0, 255.0);
                err_sum += (aligned.get(x, y, 0) as f64 - truth).abs();
                count += 1;
            }
        }
        worst_mean_err = worst_mean_err.max(err_sum / count as f64);
    }
    let elapsed = started.elapsed();
    assert!(
        worst_mean_err < 5.0,
        "interior pixel restoration mean error {worst_mean_err:.2} levels"
    );
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}, budget is 10 s");

    println!(
        "criterion 6: PASS — 200 recoveries, worst parameter error {worst_param:.3e} \
         (tolerance 1e-6), no reflections; 20 render-align runs, worst interior mean error \
         {worst_mean_err:.2}/255 (cap 5); {:.1} s",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 7 — schedule and determinism.
// ---------------------------------------------------------------------

/// The pinned schedule values hold exactly; identical seeds produce
/// bitwise-identical checkpoints; a checkpoint round-trip is bit-exact;
/// a corrupted magic is rejected as such.
#[test]
fn criterion_7_schedule_and_determinism_are_pinned() {
    // (a) Schedule values, exact.
    assert!(lr_schedule(0.001, 10.0, 7, 6) == 0.001);
    assert!(lr_schedule(0.001, 10.0, 7, 7) == 0.0001, "period 7 must hit 0.0001 at epoch 7");
    assert!(lr_schedule(0.001, 10.0, 9, 17) == 0.0001);
    assert!(lr_schedule(0.001, 10.0, 9, 26) == 0.00001, "period 9 must hit 1e-5 at epoch 26");

    // (b) Seed determinism on a real (small) training run.
    let data_cfg = DatasetConfig {
        n_train: 60,
        n_val: 0,
        n_eval: 0,
        face_count_max: 4,
        seed: 9,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&data_cfg).unwrap();
    let g_dim = data.train[0].global_context.len();
    let f_dim = data.train[0].faces[0].len();

    let run = |seed: u64| -> (GroupEmotionModel, Vec<u8>) {
        let config = ModelConfig::for_mechanism(MechanismKind::AttentionC, g_dim, f_dim);
        let model = GroupEmotionModel::init(config.clone(), init_seed(seed)).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed, ..TrainConfig::default() };
        let outcome = train(model, &cfg, &data.train, &[], |_| {}).unwrap();
        let meta = CheckpointMeta {
            seed,
            epoch: cfg.epochs,
            mechanism: MechanismKind::AttentionC,
            config,
        };
        let mut bytes = Vec::new();
        save(&mut bytes, &outcome.model, &meta).unwrap();
        (outcome.model, bytes)
    };
    let (model_a, bytes_a) = run(3);
    let (_, bytes_b) = run(3);
    let (_, bytes_c) = run(4);
    assert_eq!(bytes_a, bytes_b, "same seed must give bitwise-identical checkpoints");
    assert_ne!(bytes_a, bytes_c, "different seeds must differ");

    // (c) Round-trip is bit-exact: load -> identical model -> identical bytes.
    let (loaded, meta) = load(&mut bytes_a.as_slice()).unwrap();
    assert_eq!(loaded, model_a, "loaded model differs from the saved one");
    assert_eq!(meta.seed, 3);
    let mut bytes_again = Vec::new();
    save(&mut bytes_again, &loaded, &meta).unwrap();
    assert_eq!(bytes_a, bytes_again, "re-saving a loaded checkpoint changed its bytes");

    // (d) Corrupted magic is rejected with the dedicated diagnostic.
    let mut corrupt = bytes_a.clone();
    corrupt[..4].copy_from_slice(b"XWYZ");
    let err = load(&mut corrupt.as_slice()).unwrap_err();
    assert!(
        matches!(err, CheckpointError::BadMagic { .. }),
        "expected a bad-magic rejection, got: {err}"
    );

    println!(
        "criterion 7: PASS — schedule values exact; {}-byte checkpoints bitwise stable across \
         reruns; round-trip bit-exact; corrupted magic rejected ({err})",
        bytes_a.len()
    );
}

// ---------------------------------------------------------------------
// Criterion 8 — format robustness.
// ---------------------------------------------------------------------

/// The image parser round-trips random rasters and rejects every
/// documented malformation with its own diagnostic; the dataset reader
/// rejects malformed lines naming the line number.
#[test]
fn criterion_8_formats_reject_malformations_with_distinct_diagnostics() {
    // Round-trips over random images.
    let root = CounterRng::new(0xF0);
    for t in 0..20u64 {
        let mut rng = root.stream(t);
        let (w, h) = (1 + rng.next_below(16), 1 + rng.next_below(16));
        let channels = if rng.next_below(2) == 0 { 1 } else { 3 };
        let mut img = Image::new(w, h, channels).unwrap();
        for v in img.data.iter_mut() {
            *v = (rng.next_u64() & 0xFF) as u8;
        }
        let mut bytes = Vec::new();
        write_pnm(&mut bytes, &img).unwrap();
        assert_eq!(read_pnm(&mut bytes.as_slice()).unwrap(), img);
    }

    // Each malformation gets its own diagnostic.
    let malformed: Vec<(&str, Vec<u8>)> = vec![
        ("foreign magic", b"P4\n2 2\n255\n\0\0\0\0".to_vec()),
        ("16-bit maxval", b"P5\n2 2\n65535\n\0\0\0\0".to_vec()),
        ("non-numeric width", b"P5\nabc 2\n255\n\0\0\0\0".to_vec()),
        ("zero width", b"P5\n0 2\n255\n".to_vec()),
        ("oversized width", b"P5\n70000 2\n255\n".to_vec()),
        ("truncated raster", b"P5\n2 2\n255\n\0\0\0".to_vec()),
        ("trailing bytes", b"P5\n2 2\n255\n\0\0\0\0\0".to_vec()),
        ("header cut short", b"P5\n2".to_vec()),
    ];
    let mut diagnostics = BTreeSet::new();
    for (what, bytes) in &malformed {
        let err = read_pnm(&mut bytes.as_slice())
            .expect_err(&format!("{what} must be rejected"));
        match (*what, &err) {
            ("foreign magic", PnmError::BadMagic { .. })
            | ("16-bit maxval", PnmError::UnsupportedMaxval { .. })
            | ("non-numeric width", PnmError::Header(_))
            | ("zero width", PnmError::Header(_))
            | ("oversized width", PnmError::Header(_))
            | ("truncated raster", PnmError::TruncatedRaster { .. })
            | ("trailing bytes", PnmError::TrailingBytes(_))
            | ("header cut short", PnmError::Header(_)) => {}
            (what, err) => panic!("{what}: wrong diagnostic class: {err}"),
        }
        diagnostics.insert(err.to_string());
    }
    assert_eq!(
        diagnostics.len(),
        malformed.len(),
        "diagnostics are not pairwise distinct: {diagnostics:#?}"
    );

    // Dataset reader: malformed lines are rejected with line numbers.
    let ok = r#"{"id":"a","label":0,"global":[0.5],"faces":[[1.0]]}"#;
    let cases: Vec<(String, usize, &str)> = vec![
        (format!("{ok}\nnot json at all"), 2, "syntax"),
        (format!("{ok}\n{}\n{ok}", r#"{"id":"b","label":0,"global":[0.5],"faces":[]}"#), 2, "no faces"),
        (
            format!("{ok}\n{}", r#"{"id":"c","label":9,"global":[0.5],"faces":[[1.0]]}"#),
            2,
            "label out of range",
        ),
        (
            format!(
                "{ok}\n{}\n{}",
                r#"{"id":"d","label":1,"global":[0.5],"faces":[[1.0]]}"#,
                r#"{"id":"d","label":1,"global":[0.5],"faces":[[1.0]]}"#
            ),
            3,
            "duplicate id",
        ),
        (
            format!("{}", r#"{"id":"e","label":2,"global":[0.5],"faces":[[1.0]],"dominant":3}"#),
            1,
            "dominant out of range",
        ),
    ];
    for (text, want_line, what) in &cases {
        let err = read_partition(text.as_bytes())
            .expect_err(&format!("{what} must be rejected"));
        match err {
            DataError::Parse { line, ref msg } => {
                assert_eq!(line, *want_line, "{what}: wrong line number ({msg})");
                assert!(
                    err.to_string().contains(&format!("line {want_line}")),
                    "{what}: diagnostic does not name the line: {err}"
                );
            }
            other => panic!("{what}: expected a line-numbered parse error, got {other}"),
        }
    }

    println!(
        "criterion 8: PASS — 20 image round-trips; {} malformations each with a distinct \
         diagnostic; {} malformed dataset lines rejected with line numbers",
        malformed.len(),
        cases.len()
    );
}
