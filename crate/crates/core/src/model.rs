//! The end-to-end group-emotion model: both encoder branches, one pooling
//! mechanism, per-branch batch normalization, concatenation, dropout, and
//! a linear softmax classifier over three classes.
//!
//! The forward pass is generic over the scalar type so the same graph code
//! runs in `f32` for training/inference and in `f64` for the
//! finite-difference gradient oracle.

use serde::{Deserialize, Serialize};

use crate::attention::{MechanismKind, PoolGraph, PoolOptions, PoolParams};
use crate::data::GroupSample;
use crate::encoder::{EncoderConfig, EncoderGraph, EncoderParams, LinearLayer};
use crate::rng::CounterRng;
use crate::tape::{BnRunning, Tape, Var, EPS_CE};
use crate::tensor::{Real, Shape, Tensor, TensorError};

/// The three group-emotion classes. The integer encoding is fixed:
/// 0 = Negative, 1 = Neutral, 2 = Positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Neutral,
    Positive,
}

impl Label {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Neutral => 1,
            Label::Positive => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self, TensorError> {
        match i {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Neutral),
            2 => Ok(Label::Positive),
            other => Err(TensorError::invalid(
                "label",
                format!("class index {other} out of range (expected 0, 1, or 2)"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Negative => "Negative",
            Label::Neutral => "Neutral",
            Label::Positive => "Positive",
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.index() as u64)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let i = u64::deserialize(d)?;
        Label::from_index(i as usize).map_err(serde::de::Error::custom)
    }
}

/// Probability distribution over the three classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassProbs {
    pub values: [f32; 3],
}

impl ClassProbs {
    /// Argmax class; ties break toward the lowest class index.
    pub fn predict(&self) -> Label {
        let mut best = 0;
        for i in 1..3 {
            if self.values[i] > self.values[best] {
                best = i;
            }
        }
        Label::from_index(best).expect("index < 3")
    }

    /// Non-negative entries summing to 1 within 1e-6.
    pub fn is_valid(&self) -> bool {
        let sum: f32 = self.values.iter().sum();
        self.values.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() < 1e-6
    }
}

/// Cross-entropy of a predicted distribution against the true label,
/// −ln(max(p[label], 1e-12)).
pub fn loss(probs: &ClassProbs, label: Label) -> f32 {
    -(probs.values[label.index()].max(EPS_CE as f32)).ln()
}

/// Whether a forward pass runs in training mode (batch statistics,
/// dropout) or inference mode (running statistics, deterministic).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Full architecture description; everything needed to rebuild a model's
/// parameter shapes (and therefore to load a checkpoint).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mechanism: MechanismKind,
    pub global_encoder: EncoderConfig,
    pub face_encoder: EncoderConfig,
    /// Hidden width of the AttentionC scorer.
    #[serde(default = "default_scorer_hidden")]
    pub scorer_hidden: usize,
    /// Dropout probability applied after concatenation in train mode.
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default)]
    pub pool_options: PoolOptions,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_scorer_hidden() -> usize {
    64
}

fn default_dropout() -> f64 {
    0.5
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Standard-regime defaults for the given mechanism: linear encoders, a
    /// 256-dimensional code on both branches — except AttentionB, whose
    /// face features are 64-dimensional.
    pub fn for_mechanism(mechanism: MechanismKind, global_in: usize, face_in: usize) -> Self {
        let face_out = match mechanism {
            MechanismKind::AttentionB => 64,
            _ => 256,
        };
        ModelConfig {
            mechanism,
            global_encoder: EncoderConfig::linear(global_in, 256),
            face_encoder: EncoderConfig::linear(face_in, face_out),
            scorer_hidden: default_scorer_hidden(),
            dropout_p: default_dropout(),
            pool_options: PoolOptions::default(),
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
        }
    }

    pub fn global_dim(&self) -> usize {
        self.global_encoder.output_dim
    }

    pub fn face_dim(&self) -> usize {
        self.face_encoder.output_dim
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.global_encoder.validate()?;
        self.face_encoder.validate()?;
        if self.mechanism == MechanismKind::AttentionA && self.global_dim() != self.face_dim() {
            return Err(TensorError::invalid(
                "model config",
                format!(
                    "attention_a scores faces against the global feature directly, \
                     so the branch dimensions must match (global {} vs face {})",
                    self.global_dim(),
                    self.face_dim()
                ),
            ));
        }
        if self.scorer_hidden == 0 {
            return Err(TensorError::invalid("model config", "scorer_hidden must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TensorError::invalid(
                "model config",
                format!("dropout probability {} outside [0, 1)", self.dropout_p),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(TensorError::invalid(
                "model config",
                "batch-norm momentum must be in [0, 1] and eps positive",
            ));
        }
        Ok(())
    }
}

/// All learnable tensors of a model, generic over scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub global_enc: EncoderParams<T>,
    pub face_enc: EncoderParams<T>,
    pub pool: PoolParams<T>,
    pub bn_g_gamma: Tensor<T>,
    pub bn_g_beta: Tensor<T>,
    pub bn_f_gamma: Tensor<T>,
    pub bn_f_beta: Tensor<T>,
    /// Classifier weight, (3 × (D_g + D_f)).
    pub cls_weight: Tensor<T>,
    pub cls_bias: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut CounterRng) -> Self {
        let dg = config.global_dim();
        let df = config.face_dim();
        let cls = LinearLayer::init(Label::COUNT, dg + df, &mut rng.stream(3));
        ModelParams {
            global_enc: EncoderParams::init(&config.global_encoder, &mut rng.stream(0)),
            face_enc: EncoderParams::init(&config.face_encoder, &mut rng.stream(1)),
            pool: PoolParams::init(
                config.mechanism,
                df,
                dg,
                config.scorer_hidden,
                &mut rng.stream(2),
            ),
            bn_g_gamma: Tensor::full(Shape::Vector(dg), T::one()),
            bn_g_beta: Tensor::zeros(Shape::Vector(dg)),
            bn_f_gamma: Tensor::full(Shape::Vector(df), T::one()),
            bn_f_beta: Tensor::zeros(Shape::Vector(df)),
            cls_weight: cls.weight,
            cls_bias: cls.bias,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            global_enc: self.global_enc.cast(),
            face_enc: self.face_enc.cast(),
            pool: self.pool.cast(),
            bn_g_gamma: self.bn_g_gamma.cast(),
            bn_g_beta: self.bn_g_beta.cast(),
            bn_f_gamma: self.bn_f_gamma.cast(),
            bn_f_beta: self.bn_f_beta.cast(),
            cls_weight: self.cls_weight.cast(),
            cls_bias: self.cls_bias.cast(),
        }
    }

    /// Named parameter tensors in canonical order. This order is shared by
    /// `ModelGraph::param_vars`, the optimizer state, and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("global_enc", &self.global_enc), ("face_enc", &self.face_enc)] {
            for (i, layer) in enc.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &layer.weight));
                out.push((format!("{prefix}.{i}.bias"), &layer.bias));
            }
        }
        for (name, t) in self.pool.tensors() {
            out.push((name.to_string(), t));
        }
        out.push(("bn_global.gamma".to_string(), &self.bn_g_gamma));
        out.push(("bn_global.beta".to_string(), &self.bn_g_beta));
        out.push(("bn_pooled.gamma".to_string(), &self.bn_f_gamma));
        out.push(("bn_pooled.beta".to_string(), &self.bn_f_beta));
        out.push(("classifier.weight".to_string(), &self.cls_weight));
        out.push(("classifier.bias".to_string(), &self.cls_bias));
        out
    }

    /// Mutable variant of `named`, same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (prefix, enc) in
            [("global_enc", &mut self.global_enc), ("face_enc", &mut self.face_enc)]
        {
            for (i, layer) in enc.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut layer.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut layer.bias));
            }
        }
        for (name, t) in self.pool.tensors_mut() {
            out.push((name.to_string(), t));
        }
        out.push(("bn_global.gamma".to_string(), &mut self.bn_g_gamma));
        out.push(("bn_global.beta".to_string(), &mut self.bn_g_beta));
        out.push(("bn_pooled.gamma".to_string(), &mut self.bn_f_gamma));
        out.push(("bn_pooled.beta".to_string(), &mut self.bn_f_beta));
        out.push(("classifier.weight".to_string(), &mut self.cls_weight));
        out.push(("classifier.bias".to_string(), &mut self.cls_bias));
        out
    }
}

/// A model's parameters recorded on a tape.
pub struct ModelGraph<'t, T: Real> {
    pub global_enc: EncoderGraph<'t, T>,
    pub face_enc: EncoderGraph<'t, T>,
    pub pool: PoolGraph<'t, T>,
    pub bn_g_gamma: Var<'t, T>,
    pub bn_g_beta: Var<'t, T>,
    pub bn_f_gamma: Var<'t, T>,
    pub bn_f_beta: Var<'t, T>,
    pub cls_weight: Var<'t, T>,
    cls_weight_t: Var<'t, T>,
    pub cls_bias: Var<'t, T>,
}

impl<'t, T: Real> ModelGraph<'t, T> {
    pub fn insert(
        tape: &'t Tape<T>,
        params: &ModelParams<T>,
        trainable: bool,
    ) -> Result<Self, TensorError> {
        let rec = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        let cls_weight = rec(&params.cls_weight);
        Ok(ModelGraph {
            global_enc: EncoderGraph::insert(tape, &params.global_enc, trainable)?,
            face_enc: EncoderGraph::insert(tape, &params.face_enc, trainable)?,
            pool: PoolGraph::insert(tape, &params.pool, trainable)?,
            bn_g_gamma: rec(&params.bn_g_gamma),
            bn_g_beta: rec(&params.bn_g_beta),
            bn_f_gamma: rec(&params.bn_f_gamma),
            bn_f_beta: rec(&params.bn_f_beta),
            cls_weight,
            cls_weight_t: cls_weight.transpose()?,
            cls_bias: rec(&params.cls_bias),
        })
    }

    /// Parameter vars aligned with `ModelParams::named` order.
    pub fn param_vars(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        out.extend(self.global_enc.param_vars());
        out.extend(self.face_enc.param_vars());
        out.extend(self.pool.param_vars());
        out.extend([
            self.bn_g_gamma,
            self.bn_g_beta,
            self.bn_f_gamma,
            self.bn_f_beta,
            self.cls_weight,
            self.cls_bias,
        ]);
        out
    }
}

/// Batch-norm inputs for one forward pass: train mode owns mutable running
/// stats (they are updated as a side effect), eval mode reads them.
pub enum BnForward<'a, T: Real> {
    Train { bn_g: &'a mut BnRunning<T>, bn_f: &'a mut BnRunning<T> },
    Eval { bn_g: &'a BnRunning<T>, bn_f: &'a BnRunning<T> },
}

/// Result of a batched forward pass.
pub struct BatchOutput<'t, T: Real> {
    /// (B × 3) class probabilities, one row per sample.
    pub probs: Var<'t, T>,
    /// Per-sample attention weights over that sample's faces.
    pub attention: Vec<Var<'t, T>>,
}

/// Runs the full pipeline over a batch of samples:
/// encode_global → encode_faces → pool → per-branch batch norm → concat →
/// dropout (train only) → linear classifier → softmax.
pub fn forward_batch<'t, T: Real>(
    tape: &'t Tape<T>,
    graph: &ModelGraph<'t, T>,
    config: &ModelConfig,
    samples: &[&GroupSample],
    bn: BnForward<'_, T>,
    mut dropout: Option<(f64, &mut CounterRng)>,
) -> Result<BatchOutput<'t, T>, TensorError> {
    if samples.is_empty() {
        return Err(TensorError::invalid("forward", "empty batch"));
    }
    let g_in = config.global_encoder.input_dim;
    let f_in = config.face_encoder.input_dim;
    for s in samples {
        if s.faces.is_empty() {
            return Err(TensorError::invalid(
                "forward",
                format!("sample '{}' has no faces; zero-face samples are rejected", s.id),
            ));
        }
        if s.global_context.len() != g_in {
            return Err(TensorError::invalid(
                "forward",
                format!(
                    "sample '{}' has a {}-dim global context, model expects {g_in}",
                    s.id,
                    s.global_context.len()
                ),
            ));
        }
        for (i, face) in s.faces.iter().enumerate() {
            if face.len() != f_in {
                return Err(TensorError::invalid(
                    "forward",
                    format!(
                        "sample '{}' face {i} has dimension {}, model expects {f_in}",
                        s.id,
                        face.len()
                    ),
                ));
            }
        }
    }

    // Global branch: stack raw contexts and encode all rows at once.
    let globals_raw: Vec<Vec<T>> = samples
        .iter()
        .map(|s| s.global_context.iter().map(|&v| T::from_f32(v)).collect())
        .collect();
    let globals = tape.leaf(Tensor::from_rows(&globals_raw)?);
    let g_enc = graph.global_enc.encode_rows(globals)?;

    // Local branch: encode and pool each sample's face set.
    let mut pooled = Vec::with_capacity(samples.len());
    let mut attention = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rows: Vec<Vec<T>> = s
            .faces
            .iter()
            .map(|f| f.iter().map(|&v| T::from_f32(v)).collect())
            .collect();
        let faces = tape.leaf(Tensor::from_rows(&rows)?);
        let feats = graph.face_enc.encode_rows(faces)?;
        let context = if config.mechanism.needs_context() {
            Some(g_enc.row(i)?)
        } else {
            None
        };
        let (p, w) = graph.pool.pool(feats, context, &config.pool_options)?;
        pooled.push(p);
        attention.push(w);
    }
    let pooled_mat = tape.stack_rows(&pooled)?;

    // Normalize each branch, then fuse.
    let momentum = T::from_f64(config.bn_momentum);
    let eps = T::from_f64(config.bn_eps);
    let (g_norm, p_norm) = match bn {
        BnForward::Train { bn_g, bn_f } => (
            tape.batch_norm_train(g_enc, graph.bn_g_gamma, graph.bn_g_beta, bn_g, momentum, eps)?,
            tape.batch_norm_train(
                pooled_mat,
                graph.bn_f_gamma,
                graph.bn_f_beta,
                bn_f,
                momentum,
                eps,
            )?,
        ),
        BnForward::Eval { bn_g, bn_f } => (
            tape.batch_norm_eval(g_enc, graph.bn_g_gamma, graph.bn_g_beta, bn_g, eps)?,
            tape.batch_norm_eval(pooled_mat, graph.bn_f_gamma, graph.bn_f_beta, bn_f, eps)?,
        ),
    };
    let mut fused = g_norm.concat_cols(p_norm)?;
    if let Some((p, rng)) = dropout.take() {
        if p > 0.0 {
            fused = tape.dropout(fused, p, rng)?;
        }
    }

    let logits = fused.matmul(graph.cls_weight_t)?.add_row_broadcast(graph.cls_bias)?;
    let probs = logits.softmax_rows()?;
    Ok(BatchOutput { probs, attention })
}

/// Mean cross-entropy of a batch-probability node against labels.
pub fn batch_loss<'t, T: Real>(
    probs: Var<'t, T>,
    labels: &[usize],
) -> Result<Var<'t, T>, TensorError> {
    Ok(probs.cross_entropy_rows(labels)?.mean_all())
}

/// A trained (or initializing) model: configuration, parameters, batch-norm
/// running statistics, and the current mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEmotionModel {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub bn_g: BnRunning<f32>,
    pub bn_f: BnRunning<f32>,
    pub mode: Mode,
}

impl GroupEmotionModel {
    /// Fresh model with Xavier-initialized weights drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = CounterRng::new(seed);
        let params = ModelParams::init(&config, &mut rng);
        let bn_g = BnRunning::new(config.global_dim());
        let bn_f = BnRunning::new(config.face_dim());
        Ok(GroupEmotionModel { config, params, bn_g, bn_f, mode: Mode::Eval })
    }

    /// Inference on one sample: class probabilities plus the attention
    /// weights over its faces. Requires eval mode (train-mode statistics
    /// need a batch; see the trainer).
    pub fn forward(&self, sample: &GroupSample) -> Result<(ClassProbs, Vec<f32>), TensorError> {
        if self.mode != Mode::Eval {
            return Err(TensorError::invalid(
                "forward",
                "single-sample forward requires eval mode; train-mode passes go through the trainer",
            ));
        }
        let tape: Tape<f32> = Tape::new();
        let graph = ModelGraph::insert(&tape, &self.params, false)?;
        let out = forward_batch(
            &tape,
            &graph,
            &self.config,
            &[sample],
            BnForward::Eval { bn_g: &self.bn_g, bn_f: &self.bn_f },
            None,
        )?;
        let probs_row = out.probs.value();
        let mut values = [0.0f32; 3];
        values.copy_from_slice(probs_row.row(0));
        Ok((ClassProbs { values }, out.attention[0].value().data().to_vec()))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Component-wise mean of the members' class probabilities (all models in
/// eval mode). Rejects an empty ensemble.
pub fn ensemble_predict(
    models: &[GroupEmotionModel],
    sample: &GroupSample,
) -> Result<ClassProbs, TensorError> {
    if models.is_empty() {
        return Err(TensorError::invalid("ensemble", "no models given"));
    }
    let mut acc = [0.0f32; 3];
    for m in models {
        let (p, _) = m.forward(sample)?;
        for (a, v) in acc.iter_mut().zip(p.values) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= models.len() as f32;
    }
    Ok(ClassProbs { values: acc })
}
