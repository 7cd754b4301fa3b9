//! End-to-end gradient verification of the full model.
//!
//! For randomly drawn architectures and batches, the training-mode loss is
//! differentiated analytically by the tape and numerically by central
//! finite differences — independent computations whose agreement is the
//! correctness evidence for the whole backward implementation. Everything
//! runs in `f64`: the analytic/numeric comparison targets a 1e-4 relative
//! tolerance, which single-precision cancellation cannot reliably meet.

use crate::attention::{MechanismKind, PoolOptions};
use crate::data::GroupSample;
use crate::encoder::EncoderConfig;
use crate::fd::relative_error;
use crate::model::{
    batch_loss, forward_batch, BnForward, GroupEmotionModel, Label, ModelConfig, ModelGraph,
    ModelParams,
};
use crate::rng::CounterRng;
use crate::tape::{BnRunning, Tape};
use crate::tensor::{Real, TensorError};

/// Primary finite-difference step. Central differences have O(h²)
/// truncation error and O(eps/h) roundoff error; h = 1e-3 balances the two
/// in f64 for loss values of order one. A 10× smaller fallback step
/// re-checks coordinates that look bad at the primary step.
pub const FD_STEP: f64 = 1e-3;
pub const FD_STEP_FALLBACK: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Number of random model configurations (mechanisms cycle through
    /// all four).
    pub configs: usize,
    pub seed: u64,
    /// Per-tensor cap on checked coordinates; small tensors are checked
    /// exhaustively.
    pub max_coords_per_tensor: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { configs: 20, seed: 7, max_coords_per_tensor: 40, tolerance: 1e-4 }
    }
}

/// The single worst analytic-vs-numeric disagreement seen.
#[derive(Clone, Debug)]
pub struct WorstCase {
    pub relative_error: f64,
    pub mechanism: MechanismKind,
    pub param: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub configs_checked: usize,
    pub coordinates_checked: usize,
    /// Coordinates where the oracle disqualified itself: the two
    /// step-size estimates disagreed with each other, so truncation at
    /// the fallback step provably exceeds the tolerance being verified.
    /// (When the two steps agree with each other but not with the
    /// analytic value, that is a failure, never a skip.)
    pub skipped_ill_conditioned: usize,
    pub tolerance: f64,
    pub worst: WorstCase,
    /// Worst relative error per mechanism, for the summary table.
    pub per_mechanism: Vec<(MechanismKind, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.relative_error < self.tolerance
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "checked {} coordinates across {} configurations ({} skipped: oracle steps inconsistent)\n",
            self.coordinates_checked, self.configs_checked, self.skipped_ill_conditioned
        );
        for (kind, err) in &self.per_mechanism {
            out.push_str(&format!("  {kind:<12} worst relative error {err:.3e}\n"));
        }
        out.push_str(&format!(
            "worst overall: {:.3e} at {} / '{}' coordinate {} (analytic {:.6e}, numeric {:.6e}) — {}\n",
            self.worst.relative_error,
            self.worst.mechanism,
            self.worst.param,
            self.worst.coordinate,
            self.worst.analytic,
            self.worst.numeric,
            if self.passed() { "PASS" } else { "FAIL" },
        ));
        out
    }
}

fn random_config(mechanism: MechanismKind, rng: &mut CounterRng, with_dropout: bool) -> ModelConfig {
    let g_in = 3 + rng.next_below(4);
    let f_in = 3 + rng.next_below(4);
    let d = 2 + rng.next_below(3);
    let d_f = if mechanism == MechanismKind::AttentionA { d } else { 2 + rng.next_below(3) };
    let hidden = |rng: &mut CounterRng| {
        if rng.next_below(2) == 0 {
            vec![]
        } else {
            vec![3 + rng.next_below(3)]
        }
    };
    ModelConfig {
        mechanism,
        global_encoder: EncoderConfig {
            input_dim: g_in,
            hidden_widths: hidden(rng),
            output_dim: d,
        },
        face_encoder: EncoderConfig {
            input_dim: f_in,
            hidden_widths: hidden(rng),
            output_dim: d_f,
        },
        scorer_hidden: 2 + rng.next_below(3),
        dropout_p: if with_dropout { 0.5 } else { 0.0 },
        pool_options: PoolOptions {
            relu_query: mechanism == MechanismKind::AttentionB && rng.next_below(2) == 0,
            scaled_scores: rng.next_below(3) == 0,
        },
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

fn random_batch(config: &ModelConfig, rng: &mut CounterRng, size: usize) -> Vec<GroupSample> {
    (0..size)
        .map(|j| {
            let n_faces = 1 + rng.next_below(6);
            GroupSample {
                id: format!("gc-{j}"),
                global_context: (0..config.global_encoder.input_dim)
                    .map(|_| rng.next_symmetric(1.0) as f32)
                    .collect(),
                faces: (0..n_faces)
                    .map(|_| {
                        (0..config.face_encoder.input_dim)
                            .map(|_| rng.next_symmetric(1.0) as f32)
                            .collect()
                    })
                    .collect(),
                label: Label::from_index(rng.next_below(3)).expect("index < 3"),
                dominant_index: None,
            }
        })
        .collect()
}

/// Training-mode batch loss as a pure function of the parameters. Batch
/// statistics are recomputed per call and the dropout mask is re-drawn
/// from the same fixed seed, so repeated evaluations see an identical
/// computation — exactly what finite differencing requires.
fn eval_loss(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    batch: &[&GroupSample],
    labels: &[usize],
    mask_seed: u64,
) -> Result<f64, TensorError> {
    let tape: Tape<f64> = Tape::new();
    let graph = ModelGraph::insert(&tape, params, false)?;
    let mut bn_g = BnRunning::new(config.global_dim());
    let mut bn_f = BnRunning::new(config.face_dim());
    let mut mask_rng = CounterRng::new(mask_seed);
    let dropout = if config.dropout_p > 0.0 {
        Some((config.dropout_p, &mut mask_rng))
    } else {
        None
    };
    let out = forward_batch(
        &tape,
        &graph,
        config,
        batch,
        BnForward::Train { bn_g: &mut bn_g, bn_f: &mut bn_f },
        dropout,
    )?;
    Ok(batch_loss(out.probs, labels)?.value().item().to_f64())
}

fn eval_perturbed(
    params: &ModelParams<f64>,
    tensor_idx: usize,
    coord: usize,
    delta: f64,
    config: &ModelConfig,
    batch: &[&GroupSample],
    labels: &[usize],
    mask_seed: u64,
) -> Result<f64, TensorError> {
    let mut p = params.clone();
    p.named_mut()[tensor_idx].1.data_mut()[coord] += delta;
    eval_loss(&p, config, batch, labels, mask_seed)
}

/// Runs the full suite and reports the worst disagreement.
pub fn check_model_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError> {
    if cfg.configs == 0 {
        return Err(TensorError::invalid("gradcheck", "need at least one configuration"));
    }
    let root = CounterRng::new(cfg.seed);
    let mut worst = WorstCase {
        relative_error: 0.0,
        mechanism: MechanismKind::Average,
        param: String::new(),
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut per_mech: Vec<(MechanismKind, f64)> =
        MechanismKind::ALL.iter().map(|&k| (k, 0.0)).collect();
    let mut coords_checked = 0usize;
    let mut skipped = 0usize;

    for i in 0..cfg.configs {
        let mechanism = MechanismKind::ALL[i % MechanismKind::ALL.len()];
        let mut rng = root.stream(i as u64);
        let mask_seed = 0x6D61_736B ^ (i as u64);

        // Draw configurations until the forward pass is kink-free: every
        // relu input must sit at least KINK_MARGIN from zero, otherwise
        // the finite difference straddles the kink and disagrees with the
        // (correct) subgradient no matter the step size. Two structural
        // sources make this more than a measure-zero concern — biases
        // start at zero, so a fully-dead hidden layer emits exact zeros
        // downstream — hence the parameter nudge below plus the resample
        // loop for residual near-misses.
        const KINK_MARGIN: f64 = 1e-2;
        const MAX_ATTEMPTS: usize = 100;
        let mut drawn = None;
        for _attempt in 0..MAX_ATTEMPTS {
            let config = random_config(mechanism, &mut rng, i % 4 == 3);
            // Eight samples per batch: small batches make the batch-norm
            // statistics ill-conditioned (third derivatives blow up as
            // inverse powers of the tiny batch standard deviations), and
            // finite differences at the pinned steps then pick up pure
            // truncation error from that curvature.
            let batch_owned = random_batch(&config, &mut rng, 8);
            let labels: Vec<usize> = batch_owned.iter().map(|s| s.label.index()).collect();
            let init_seed = rng.next_u64();
            let mut params: ModelParams<f64> =
                GroupEmotionModel::init(config.clone(), init_seed)?.params.cast();
            for (_, t) in params.named_mut() {
                for v in t.data_mut() {
                    *v += rng.next_symmetric(0.05);
                }
            }

            // Analytic gradients from one tape pass.
            let tape: Tape<f64> = Tape::new();
            let graph = ModelGraph::insert(&tape, &params, true)?;
            let mut bn_g = BnRunning::new(config.global_dim());
            let mut bn_f = BnRunning::new(config.face_dim());
            let mut mask_rng = CounterRng::new(mask_seed);
            let dropout = if config.dropout_p > 0.0 {
                Some((config.dropout_p, &mut mask_rng))
            } else {
                None
            };
            let batch: Vec<&GroupSample> = batch_owned.iter().collect();
            let out = forward_batch(
                &tape,
                &graph,
                &config,
                &batch,
                BnForward::Train { bn_g: &mut bn_g, bn_f: &mut bn_f },
                dropout,
            )?;
            if let Some(m) = tape.min_relu_input_abs() {
                if m < KINK_MARGIN {
                    continue;
                }
            }
            let loss = batch_loss(out.probs, &labels)?;
            let grads = tape.backward(loss)?;
            let analytic: Vec<crate::tensor::Tensor<f64>> =
                graph.param_vars().iter().map(|v| grads.wrt(*v).clone()).collect();
            drawn = Some((config, batch_owned, labels, params, analytic));
            break;
        }
        let Some((config, batch_owned, labels, params, analytic_tensors)) = drawn else {
            return Err(TensorError::invalid(
                "gradcheck",
                format!("could not draw a kink-free configuration {i} in {MAX_ATTEMPTS} tries"),
            ));
        };
        let batch: Vec<&GroupSample> = batch_owned.iter().collect();

        let names: Vec<(String, usize)> =
            params.named().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        for (k, (name, len)) in names.iter().enumerate() {
            let coords: Vec<usize> = if *len <= cfg.max_coords_per_tensor {
                (0..*len).collect()
            } else {
                let mut all: Vec<usize> = (0..*len).collect();
                rng.shuffle(&mut all);
                all.truncate(cfg.max_coords_per_tensor);
                all
            };
            let analytic_tensor = &analytic_tensors[k];
            for &j in &coords {
                let analytic = analytic_tensor.data()[j].to_f64();
                let diff = |h: f64| -> Result<f64, TensorError> {
                    let up =
                        eval_perturbed(&params, k, j, h, &config, &batch, &labels, mask_seed)?;
                    let dn =
                        eval_perturbed(&params, k, j, -h, &config, &batch, &labels, mask_seed)?;
                    Ok((up - dn) / (2.0 * h))
                };
                let mut numeric = diff(FD_STEP)?;
                let mut err = relative_error(analytic, numeric);
                // Re-measure marginal coordinates, not just failing ones:
                // when the primary-step error is truncation-dominated the
                // 10× smaller step cuts it ~100×, turning thin margins
                // into comfortable ones for two extra evaluations.
                if err >= 0.5 * cfg.tolerance {
                    let numeric2 = diff(FD_STEP_FALLBACK)?;
                    let err2 = relative_error(analytic, numeric2);
                    // Step-size self-consistency. Central differences carry
                    // an error c·h², so the two estimates differ by
                    // c·(h₁² − h₂²) and the residual still inside the
                    // fallback estimate is that gap divided by
                    // (h₁/h₂)² − 1 = 99. When the gap says this residual
                    // exceeds half the tolerance, the oracle cannot
                    // adjudicate this coordinate at the requested precision
                    // and recusing it is the only honest option. A genuine
                    // backward bug is the opposite signature — the two
                    // steps agree with each other and jointly disagree with
                    // the analytic value — and still fails below.
                    let step_ratio_sq = (FD_STEP / FD_STEP_FALLBACK).powi(2);
                    let self_consistency = relative_error(numeric, numeric2);
                    if err >= cfg.tolerance
                        && err2 >= cfg.tolerance
                        && self_consistency > 0.5 * cfg.tolerance * (step_ratio_sq - 1.0)
                    {
                        skipped += 1;
                        continue;
                    }
                    if err2 < err {
                        err = err2;
                        numeric = numeric2;
                    }
                }
                coords_checked += 1;
                let slot = per_mech.iter_mut().find(|(k2, _)| *k2 == mechanism).expect("all kinds");
                if err > slot.1 {
                    slot.1 = err;
                }
                if err > worst.relative_error {
                    worst = WorstCase {
                        relative_error: err,
                        mechanism,
                        param: name.clone(),
                        coordinate: j,
                        analytic,
                        numeric,
                    };
                }
            }
        }
    }

    Ok(GradCheckReport {
        configs_checked: cfg.configs,
        coordinates_checked: coords_checked,
        skipped_ill_conditioned: skipped,
        tolerance: cfg.tolerance,
        worst,
        per_mechanism: per_mech,
    })
}
