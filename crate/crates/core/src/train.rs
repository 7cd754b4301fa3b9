//! Training loop: minibatch SGD with classical momentum and a step-decay
//! learning-rate schedule, bitwise deterministic for a given seed.

use serde::{Deserialize, Serialize};

use crate::data::GroupSample;
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{
    batch_loss, forward_batch, BnForward, GroupEmotionModel, Label, Mode, ModelGraph,
};
use crate::rng::CounterRng;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate. Zero is allowed (parameters then stay put),
    /// negative rates are rejected.
    pub lr0: f64,
    /// The learning rate is divided by this factor every `decay_period`
    /// epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
    pub momentum: f64,
    /// Seed for shuffling and dropout; independent of the model-init seed.
    pub seed: u64,
    /// Fold the validation partition into the training set (used for a
    /// final run after hyperparameters are settled). Per-epoch validation
    /// accuracy is then unavailable.
    pub merge_val_into_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 27,
            batch_size: 32,
            lr0: 0.001,
            decay_factor: 10.0,
            decay_period: 9,
            momentum: 0.9,
            seed: 0,
            merge_val_into_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.batch_size < 2 {
            return Err(TensorError::invalid(
                "train config",
                "batch_size must be at least 2 (train-mode batch statistics need >= 2 rows)",
            ));
        }
        if self.lr0 < 0.0 {
            return Err(TensorError::invalid(
                "train config",
                format!("learning rate must be non-negative, got {}", self.lr0),
            ));
        }
        if self.decay_factor < 1.0 {
            return Err(TensorError::invalid(
                "train config",
                format!("decay_factor must be >= 1, got {}", self.decay_factor),
            ));
        }
        if self.decay_period == 0 {
            return Err(TensorError::invalid("train config", "decay_period must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::invalid(
                "train config",
                format!("momentum must be in [0, 1), got {}", self.momentum),
            ));
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr0 / decay_factor^(epoch / period)` with integer
/// division, epochs counted from zero. With lr0 = 0.001, factor 10 and
/// period 7 the rate drops to 0.0001 at epoch 7; with period 9 it reaches
/// 0.00001 at epoch 26 (still in the third step that began at epoch 18).
pub fn lr_schedule(lr0: f64, decay_factor: f64, decay_period: usize, epoch: usize) -> f64 {
    lr0 / decay_factor.powi((epoch / decay_period) as i32)
}

/// One epoch's summary, as logged by the trainer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Zero-based epoch index (matching the schedule's convention).
    pub epoch: usize,
    pub lr: f64,
    /// Mean training cross-entropy over the samples actually trained on.
    pub train_loss: f64,
    /// Accuracy on the validation partition, when one is available.
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub model: GroupEmotionModel,
    pub epochs: Vec<EpochStats>,
    /// Singleton tail batches that were dropped (batch statistics are
    /// undefined on one row).
    pub dropped_singleton_batches: usize,
}

/// Trains `model` on `train_set`, reporting one `EpochStats` per epoch to
/// `log`. Two runs with identical inputs produce bitwise-identical
/// parameters. The returned model is in eval mode.
pub fn train(
    mut model: GroupEmotionModel,
    cfg: &TrainConfig,
    train_set: &[GroupSample],
    val_set: &[GroupSample],
    mut log: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TensorError> {
    cfg.validate()?;
    model.config.validate()?;

    let mut pool: Vec<&GroupSample> = train_set.iter().collect();
    if cfg.merge_val_into_train {
        pool.extend(val_set.iter());
    }
    if pool.is_empty() {
        return Err(TensorError::invalid("train", "training partition is empty"));
    }
    let track_val = !cfg.merge_val_into_train && !val_set.is_empty();

    let root = CounterRng::new(cfg.seed);
    let mut shuffle_rng = root.stream(0);
    let mut dropout_rng = root.stream(1);

    let mut velocity: Vec<Tensor<f32>> = model
        .params
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();

    model.mode = Mode::Train;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut dropped = 0usize;
    let mut order: Vec<usize> = (0..pool.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr0, cfg.decay_factor, cfg.decay_period, epoch);
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 {
                dropped += 1;
                continue;
            }
            let batch: Vec<&GroupSample> = chunk.iter().map(|&i| pool[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();

            let tape: Tape<f32> = Tape::new();
            let graph = ModelGraph::insert(&tape, &model.params, true)?;
            let out = forward_batch(
                &tape,
                &graph,
                &model.config,
                &batch,
                BnForward::Train { bn_g: &mut model.bn_g, bn_f: &mut model.bn_f },
                Some((model.config.dropout_p, &mut dropout_rng)),
            )?;
            let loss = batch_loss(out.probs, &labels)?;
            let grads = tape.backward(loss)?;

            let lr_t = lr as f32;
            let mu = cfg.momentum as f32;
            let vars = graph.param_vars();
            for ((var, vel), (_, param)) in
                vars.iter().zip(velocity.iter_mut()).zip(model.params.named_mut())
            {
                let g = grads.wrt(*var);
                for (v, gi) in vel.data_mut().iter_mut().zip(g.data()) {
                    *v = mu * *v + *gi;
                }
                for (p, v) in param.data_mut().iter_mut().zip(vel.data()) {
                    *p -= lr_t * *v;
                }
            }

            loss_sum += loss.value().item().to_f64() * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(TensorError::invalid(
                "train",
                "every batch was a dropped singleton; use a larger training set or batch size",
            ));
        }

        let val_accuracy = if track_val {
            Some(evaluate(&model, val_set)?.overall)
        } else {
            None
        };
        let stats =
            EpochStats { epoch, lr, train_loss: loss_sum / seen as f64, val_accuracy };
        log(&stats);
        epochs.push(stats);
    }

    model.mode = Mode::Eval;
    Ok(TrainOutcome { model, epochs, dropped_singleton_batches: dropped })
}

/// Scores `model` on a partition using eval-mode forward passes
/// (running statistics, no dropout), regardless of the model's mode flag.
pub fn evaluate(
    model: &GroupEmotionModel,
    samples: &[GroupSample],
) -> Result<Metrics, TensorError> {
    if samples.is_empty() {
        return Err(TensorError::invalid("evaluate", "empty evaluation partition"));
    }
    let mut pairs: Vec<(Label, Label)> = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = infer_probs(model, s)?;
        pairs.push((s.label, probs.predict()));
    }
    compute_metrics(&pairs)
}

/// Eval-semantics forward pass used internally by the trainer and
/// evaluator (skips the public mode check so validation can run mid-train).
fn infer_probs(
    model: &GroupEmotionModel,
    sample: &GroupSample,
) -> Result<crate::model::ClassProbs, TensorError> {
    let tape: Tape<f32> = Tape::new();
    let graph = ModelGraph::insert(&tape, &model.params, false)?;
    let out = forward_batch(
        &tape,
        &graph,
        &model.config,
        &[sample],
        BnForward::Eval { bn_g: &model.bn_g, bn_f: &model.bn_f },
        None,
    )?;
    let row = out.probs.value();
    let mut values = [0.0f32; 3];
    values.copy_from_slice(row.row(0));
    Ok(crate::model::ClassProbs { values })
}
