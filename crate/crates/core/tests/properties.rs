//! Property-based invariant checks for the pooling mechanisms and the
//! I/O layers.
//!
//! Each property states a mathematical or format-level invariant that any
//! correct implementation must satisfy for *all* inputs, not just the
//! hand-picked ones in the unit tests: pooled outputs must not depend on
//! face order, attention weights must form a distribution, softmax must
//! survive logit shifts, and every serializer must be inverted exactly by
//! its reader.

use proptest::prelude::*;

use gemr_core::attention::{pool_eval, MechanismKind, PoolOptions, PoolParams};
use gemr_core::data::{read_partition, write_partition, GroupSample};
use gemr_core::model::Label;
use gemr_core::pnm::{read_pnm, write_pnm, Image};
use gemr_core::train::lr_schedule;
use gemr_core::{CounterRng, Tape, Tensor};

/// A face set (n × d), a matching d-dim context vector, and a random
/// permutation of the face rows.
fn faces_context_and_perm(
) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<usize>)> {
    (1usize..=6, 2usize..=5).prop_flat_map(|(n, d)| {
        (
            proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), n),
            proptest::collection::vec(-2.0f64..2.0, d),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

fn pool_all(
    faces: &[Vec<f64>],
    context: &[f64],
    param_seed: u64,
) -> Vec<(MechanismKind, Tensor<f64>, Tensor<f64>)> {
    let d = faces[0].len();
    let f = Tensor::from_rows(faces).unwrap();
    let g = Tensor::vector(context.to_vec()).unwrap();
    let opts = PoolOptions::default();
    MechanismKind::ALL
        .iter()
        .map(|&kind| {
            let mut rng = CounterRng::new(param_seed);
            let params = PoolParams::<f64>::init(kind, d, d, 8, &mut rng);
            let ctx = kind.needs_context().then_some(&g);
            let (pooled, weights) = pool_eval(&f, ctx, &params, &opts).unwrap();
            (kind, pooled, weights)
        })
        .collect()
}

proptest! {
    /// Prediction: for every mechanism, attention weights are a probability
    /// distribution (non-negative, summing to 1) and permuting the face set
    /// permutes the weights identically while leaving the pooled vector
    /// unchanged.
    /// If this fails: pooling leaks face *order* into the output — e.g. a
    /// positional term in the scorer, or a normalization over the wrong axis.
    #[test]
    fn pooling_is_a_permutation_invariant_distribution(
        (faces, context, perm) in faces_context_and_perm(),
        param_seed in 0u64..1 << 48,
    ) {
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| faces[i].clone()).collect();
        let base = pool_all(&faces, &context, param_seed);
        let shuffled = pool_all(&permuted, &context, param_seed);

        for ((kind, pooled, weights), (_, pooled_p, weights_p)) in
            base.iter().zip(shuffled.iter())
        {
            let w = weights.data();
            let sum: f64 = w.iter().sum();
            prop_assert!(
                (sum - 1.0).abs() < 1e-9,
                "{kind}: weights sum to {sum}, expected 1"
            );
            for (i, &wi) in w.iter().enumerate() {
                prop_assert!(wi >= 0.0, "{kind}: weight[{i}] = {wi} is negative");
            }

            let diff = pooled.max_abs_diff(pooled_p);
            prop_assert!(
                diff < 1e-9,
                "{kind}: pooled output moved by {diff} under a face permutation"
            );
            for (i, &src) in perm.iter().enumerate() {
                let (a, b) = (weights_p.data()[i], w[src]);
                prop_assert!(
                    (a - b).abs() < 1e-9,
                    "{kind}: permuted weight[{i}] = {a}, expected weight[{src}] = {b}"
                );
            }
        }
    }

    /// Prediction: AttentionA scores faces by their inner product with the
    /// context query, so adding a vector orthogonal to the query to every
    /// face leaves the weights unchanged and shifts the pooled vector by
    /// exactly that vector.
    /// If this fails: the dot-product scoring mixes in components it should
    /// be blind to (wrong axis, an accidental bias, or a normalization of
    /// the face features before scoring).
    #[test]
    fn attention_a_ignores_face_components_orthogonal_to_the_query(
        (faces, context, _) in faces_context_and_perm(),
        raw in proptest::collection::vec(-2.0f64..2.0, 5),
    ) {
        let gg: f64 = context.iter().map(|x| x * x).sum();
        prop_assume!(gg > 0.5);
        let d = context.len();
        // Project a raw vector onto the orthogonal complement of the query.
        let vg: f64 = raw[..d].iter().zip(&context).map(|(v, g)| v * g).sum();
        let v_perp: Vec<f64> =
            raw[..d].iter().zip(&context).map(|(v, g)| v - vg / gg * g).collect();

        let shifted: Vec<Vec<f64>> = faces
            .iter()
            .map(|row| row.iter().zip(&v_perp).map(|(x, v)| x + v).collect())
            .collect();

        let f = Tensor::from_rows(&faces).unwrap();
        let f2 = Tensor::from_rows(&shifted).unwrap();
        let g = Tensor::vector(context).unwrap();
        let opts = PoolOptions::default();
        let params = PoolParams::<f64>::AttentionA;
        let (pooled, weights) = pool_eval(&f, Some(&g), &params, &opts).unwrap();
        let (pooled2, weights2) = pool_eval(&f2, Some(&g), &params, &opts).unwrap();

        let wdiff = weights.max_abs_diff(&weights2);
        prop_assert!(
            wdiff < 1e-9,
            "weights moved by {wdiff} under an orthogonal face shift"
        );
        let expected: Vec<f64> =
            pooled.data().iter().zip(&v_perp).map(|(p, v)| p + v).collect();
        let pdiff = pooled2.max_abs_diff(&Tensor::vector(expected).unwrap());
        prop_assert!(
            pdiff < 1e-9,
            "pooled output off by {pdiff} from the expected orthogonal shift"
        );
    }

    /// Prediction: tape softmax outputs a strictly positive distribution and
    /// is invariant to adding a constant to every logit.
    /// If this fails: the max-subtraction stabilization is missing (large
    /// logits overflow) or normalization is wrong.
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in proptest::collection::vec(-200.0f64..200.0, 1..=12),
        shift in -500.0f64..500.0,
    ) {
        let eval = |v: Vec<f64>| -> Vec<f64> {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::vector(v).unwrap());
            x.softmax().unwrap().value().data().to_vec()
        };
        let p = eval(logits.clone());
        let q = eval(logits.iter().map(|&x| x + shift).collect());

        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "softmax sums to {sum}");
        for (i, (&a, &b)) in p.iter().zip(&q).enumerate() {
            prop_assert!(a > 0.0, "softmax[{i}] = {a} is not strictly positive");
            prop_assert!(
                (a - b).abs() < 1e-12,
                "softmax[{i}] moved from {a} to {b} under a logit shift"
            );
        }
    }

    /// Prediction: the step learning-rate schedule is constant within each
    /// period, equals the base rate for the whole first period, and never
    /// increases.
    /// If this fails: an off-by-one in the epoch/period division changes
    /// which epochs train at which rate.
    #[test]
    fn lr_schedule_is_a_non_increasing_staircase(
        lr0 in 1e-6f64..1.0,
        factor in 1.5f64..50.0,
        period in 1usize..=10,
    ) {
        let mut prev = lr_schedule(lr0, factor, period, 0);
        for epoch in 0..50usize {
            let lr = lr_schedule(lr0, factor, period, epoch);
            if epoch < period {
                prop_assert!(lr == lr0, "epoch {epoch} < period {period} but lr = {lr}");
            }
            prop_assert!(lr <= prev, "lr rose from {prev} to {lr} at epoch {epoch}");
            if epoch % period == 0 && epoch > 0 {
                prop_assert!(
                    lr < prev,
                    "lr failed to drop at the period boundary, epoch {epoch}"
                );
            }
            prev = lr;
        }
    }

    /// Prediction: writing any well-formed partition and reading it back is
    /// the identity, with no warnings.
    /// If this fails: the JSONL record schema written by the generator and
    /// the one accepted by the reader have drifted apart, or float values
    /// lose precision in transit.
    #[test]
    fn partition_io_round_trips_losslessly(samples in partition()) {
        let mut buf = Vec::new();
        write_partition(&mut buf, &samples).unwrap();
        let (back, warnings) = read_partition(buf.as_slice()).unwrap();
        prop_assert!(warnings.is_empty(), "unexpected warnings: {warnings:?}");
        prop_assert_eq!(back, samples);
    }

    /// Prediction: writing any image and reading it back is the identity.
    /// If this fails: the raster length bookkeeping or the header parser
    /// mishandles some dimension/channel combination (e.g. pixel bytes that
    /// look like whitespace or header characters).
    #[test]
    fn pnm_io_round_trips_bitwise(img in image()) {
        let mut buf = Vec::new();
        write_pnm(&mut buf, &img).unwrap();
        let back = read_pnm(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, img);
    }
}

/// Random well-formed partitions: consistent dims within the partition,
/// unique ids, in-range labels and dominant indices.
fn partition() -> impl Strategy<Value = Vec<GroupSample>> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(dg, df)| {
        proptest::collection::vec(
            (
                proptest::collection::vec(-100.0f32..100.0, dg),
                proptest::collection::vec(
                    proptest::collection::vec(-100.0f32..100.0, df),
                    1..=4,
                ),
                0usize..Label::COUNT,
                proptest::option::of(any::<proptest::sample::Index>()),
            ),
            0..=6,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (global_context, faces, label, dominant))| GroupSample {
                    id: format!("s-{i:03}"),
                    dominant_index: dominant.map(|ix| ix.index(faces.len())),
                    label: Label::from_index(label).unwrap(),
                    global_context,
                    faces,
                })
                .collect()
        })
    })
}

/// Random images across both supported formats, sized so the raster can
/// contain every byte value (including ones that mimic header syntax).
fn image() -> impl Strategy<Value = Image> {
    (1usize..=24, 1usize..=24, proptest::sample::select(vec![1usize, 3]))
        .prop_flat_map(|(width, height, channels)| {
            proptest::collection::vec(any::<u8>(), width * height * channels).prop_map(
                move |data| Image { width, height, channels, data },
            )
        })
}
