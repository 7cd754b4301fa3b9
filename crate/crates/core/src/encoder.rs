//! Trainable feature encoders for the two branches.
//!
//! The global encoder maps the raw context vector to a D_g-dimensional
//! feature; the local encoder maps each raw face vector to a
//! D_f-dimensional feature, with weights shared across faces. Both are
//! multi-layer perceptrons with rectified-linear activations between
//! layers (none after the last), standing in for large pretrained
//! backbones that are out of scope here.

use serde::{Deserialize, Serialize};

use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor, TensorError};

/// Architecture of one encoder. Empty `hidden_widths` with
/// `output_dim == input_dim` denotes the identity encoder, which carries
/// no parameters at all; empty `hidden_widths` otherwise is a single
/// linear layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        EncoderConfig { input_dim, hidden_widths: Vec::new(), output_dim }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(TensorError::invalid(
                "encoder config",
                format!(
                    "all dimensions must be positive (input {}, hidden {:?}, output {})",
                    self.input_dim, self.hidden_widths, self.output_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.hidden_widths.is_empty() && self.input_dim == self.output_dim
    }

    /// (out, in) dimension pairs of the linear layers; empty for the
    /// identity encoder.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.is_identity() {
            return Vec::new();
        }
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.hidden_widths.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect();
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// One fully connected layer: weight stored (out × in) row-major plus an
/// out-length bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearLayer<T> {
    /// Xavier-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut CounterRng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Tensor::new(
            Shape::Matrix(out_dim, in_dim),
            (0..out_dim * in_dim)
                .map(|_| T::from_f64(rng.next_symmetric(limit)))
                .collect(),
        )
        .expect("positive dims");
        let bias = Tensor::zeros(Shape::Vector(out_dim));
        LinearLayer { weight, bias }
    }

    pub fn cast<U: Real>(&self) -> LinearLayer<U> {
        LinearLayer { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// All layers of one encoder (possibly none, for the identity encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<LinearLayer<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init(config: &EncoderConfig, rng: &mut CounterRng) -> Self {
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| LinearLayer::init(out, inp, rng))
            .collect();
        EncoderParams { layers }
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams { layers: self.layers.iter().map(|l| l.cast()).collect() }
    }
}

/// An encoder's parameters recorded on a tape, ready for forward passes.
/// Weight transposes are recorded once here so batched (row-matrix)
/// encoding reuses them across samples.
pub struct EncoderGraph<'t, T: Real> {
    layers: Vec<LayerVars<'t, T>>,
}

struct LayerVars<'t, T: Real> {
    weight: Var<'t, T>,
    weight_t: Var<'t, T>,
    bias: Var<'t, T>,
}

impl<'t, T: Real> EncoderGraph<'t, T> {
    /// Records the parameters on `tape`; `trainable` decides whether
    /// backward will produce gradients for them.
    pub fn insert(
        tape: &'t Tape<T>,
        params: &EncoderParams<T>,
        trainable: bool,
    ) -> Result<Self, TensorError> {
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let weight = if trainable {
                tape.param(layer.weight.clone())
            } else {
                tape.leaf(layer.weight.clone())
            };
            let bias = if trainable {
                tape.param(layer.bias.clone())
            } else {
                tape.leaf(layer.bias.clone())
            };
            layers.push(LayerVars { weight, weight_t: weight.transpose()?, bias });
        }
        Ok(EncoderGraph { layers })
    }

    /// Parameter vars in layer order (weight, bias), matching the order of
    /// `EncoderParams::layers`.
    pub fn param_vars(&self) -> Vec<Var<'t, T>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Encodes a single vector: x → W·x + b per layer, rectified-linear
    /// between layers. The identity encoder returns the input unchanged.
    pub fn encode_vector(&self, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = layer.weight.matvec(h)?.add(layer.bias)?;
        }
        Ok(h)
    }

    /// Encodes each row of an (n × input_dim) matrix independently with
    /// shared weights, producing (n × output_dim).
    pub fn encode_rows(&self, f: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let mut h = f;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = h.matmul(layer.weight_t)?.add_row_broadcast(layer.bias)?;
        }
        Ok(h)
    }
}

/// Convenience eval-mode encoding of a plain vector (no gradient).
pub fn encode_vector_eval<T: Real>(
    params: &EncoderParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let tape = Tape::new();
    let graph = EncoderGraph::insert(&tape, params, false)?;
    let v = tape.leaf(x.clone());
    Ok(graph.encode_vector(v)?.value())
}

/// Convenience eval-mode encoding of stacked face rows (no gradient).
pub fn encode_rows_eval<T: Real>(
    params: &EncoderParams<T>,
    f: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let tape = Tape::new();
    let graph = EncoderGraph::insert(&tape, params, false)?;
    let v = tape.leaf(f.clone());
    Ok(graph.encode_rows(v)?.value())
}
