//! Pooling mechanisms: collapse an (n × D_f) face-feature matrix into one
//! D_f vector plus the per-face attention weights.
//!
//! Four variants are implemented:
//! - `Average` — uniform weights 1/n;
//! - `AttentionA` — scores are dot products of each face feature with the
//!   encoded global context (requires D_g == D_f);
//! - `AttentionB` — the context is first passed through an intermediate
//!   fully connected projection to D_f, then scored as in A;
//! - `AttentionC` — a two-layer scorer (rectified-linear hidden layer)
//!   reads a scalar score directly off each face feature.
//!
//! In every case the scores go through a softmax and the pooled vector is
//! the weight-averaged sum of the face rows, so the result is a convex
//! combination of the faces and is permutation-invariant.

use serde::{Deserialize, Serialize};

use crate::encoder::LinearLayer;
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor, TensorError};

/// Which pooling mechanism a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Average,
    AttentionA,
    AttentionB,
    AttentionC,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 4] = [
        MechanismKind::Average,
        MechanismKind::AttentionA,
        MechanismKind::AttentionB,
        MechanismKind::AttentionC,
    ];

    /// Whether the mechanism consumes the encoded global context.
    pub fn needs_context(self) -> bool {
        matches!(self, MechanismKind::AttentionA | MechanismKind::AttentionB)
    }

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Average => "average",
            MechanismKind::AttentionA => "attention_a",
            MechanismKind::AttentionB => "attention_b",
            MechanismKind::AttentionC => "attention_c",
        }
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "avg" => Ok(MechanismKind::Average),
            "a" | "attention_a" | "attention-a" => Ok(MechanismKind::AttentionA),
            "b" | "attention_b" | "attention-b" => Ok(MechanismKind::AttentionB),
            "c" | "attention_c" | "attention-c" => Ok(MechanismKind::AttentionC),
            other => Err(format!(
                "unknown mechanism '{other}' (expected average, a, b, or c)"
            )),
        }
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Options shared by the score-based mechanisms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolOptions {
    /// Apply a rectified-linear activation to the projected query in
    /// AttentionB (default: the intermediate layer is linear, which makes
    /// the identity-projection reduction to AttentionA exact).
    #[serde(default)]
    pub relu_query: bool,
    /// Scale dot-product scores by 1/sqrt(D_f) in AttentionA/B (default
    /// off: plain dot products).
    #[serde(default)]
    pub scaled_scores: bool,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions { relu_query: false, scaled_scores: false }
    }
}

/// Two-layer scorer of AttentionC: D_f → hidden (rectified linear) → 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams<T> {
    pub layer1: LinearLayer<T>,
    pub layer2: LinearLayer<T>,
}

impl<T: Real> ScorerParams<T> {
    pub fn init(face_dim: usize, hidden: usize, rng: &mut CounterRng) -> Self {
        ScorerParams {
            layer1: LinearLayer::init(hidden, face_dim, rng),
            layer2: LinearLayer::init(1, hidden, rng),
        }
    }

    pub fn cast<U: Real>(&self) -> ScorerParams<U> {
        ScorerParams { layer1: self.layer1.cast(), layer2: self.layer2.cast() }
    }
}

/// Parameters carried by the selected mechanism. `Average` and
/// `AttentionA` are parameter-free; `AttentionB` carries the intermediate
/// projection (weight stored (D_f × D_g), bias D_f); `AttentionC` carries
/// the two-layer scorer.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolParams<T> {
    Average,
    AttentionA,
    AttentionB { proj: LinearLayer<T> },
    AttentionC { scorer: ScorerParams<T> },
}

impl<T: Real> PoolParams<T> {
    pub fn init(
        kind: MechanismKind,
        face_dim: usize,
        global_dim: usize,
        scorer_hidden: usize,
        rng: &mut CounterRng,
    ) -> Self {
        match kind {
            MechanismKind::Average => PoolParams::Average,
            MechanismKind::AttentionA => PoolParams::AttentionA,
            MechanismKind::AttentionB => {
                PoolParams::AttentionB { proj: LinearLayer::init(face_dim, global_dim, rng) }
            }
            MechanismKind::AttentionC => {
                PoolParams::AttentionC { scorer: ScorerParams::init(face_dim, scorer_hidden, rng) }
            }
        }
    }

    pub fn kind(&self) -> MechanismKind {
        match self {
            PoolParams::Average => MechanismKind::Average,
            PoolParams::AttentionA => MechanismKind::AttentionA,
            PoolParams::AttentionB { .. } => MechanismKind::AttentionB,
            PoolParams::AttentionC { .. } => MechanismKind::AttentionC,
        }
    }

    pub fn cast<U: Real>(&self) -> PoolParams<U> {
        match self {
            PoolParams::Average => PoolParams::Average,
            PoolParams::AttentionA => PoolParams::AttentionA,
            PoolParams::AttentionB { proj } => PoolParams::AttentionB { proj: proj.cast() },
            PoolParams::AttentionC { scorer } => {
                PoolParams::AttentionC { scorer: scorer.cast() }
            }
        }
    }

    /// Parameter tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            PoolParams::Average | PoolParams::AttentionA => Vec::new(),
            PoolParams::AttentionB { proj } => {
                vec![("pool.proj.weight", &proj.weight), ("pool.proj.bias", &proj.bias)]
            }
            PoolParams::AttentionC { scorer } => vec![
                ("pool.scorer.w1", &scorer.layer1.weight),
                ("pool.scorer.b1", &scorer.layer1.bias),
                ("pool.scorer.w2", &scorer.layer2.weight),
                ("pool.scorer.b2", &scorer.layer2.bias),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            PoolParams::Average | PoolParams::AttentionA => Vec::new(),
            PoolParams::AttentionB { proj } => {
                vec![("pool.proj.weight", &mut proj.weight), ("pool.proj.bias", &mut proj.bias)]
            }
            PoolParams::AttentionC { scorer } => vec![
                ("pool.scorer.w1", &mut scorer.layer1.weight),
                ("pool.scorer.b1", &mut scorer.layer1.bias),
                ("pool.scorer.w2", &mut scorer.layer2.weight),
                ("pool.scorer.b2", &mut scorer.layer2.bias),
            ],
        }
    }
}

/// Pooling parameters recorded on a tape (with pre-recorded transposes
/// where batched matmuls need them).
pub enum PoolGraph<'t, T: Real> {
    Average,
    AttentionA,
    AttentionB {
        weight: Var<'t, T>,
        bias: Var<'t, T>,
    },
    AttentionC {
        w1: Var<'t, T>,
        w1_t: Var<'t, T>,
        b1: Var<'t, T>,
        w2: Var<'t, T>,
        w2_row: Var<'t, T>,
        /// layer2 bias as stored (length-1 vector parameter).
        b2: Var<'t, T>,
        /// layer2 bias reduced to a scalar node for broadcasting.
        b2_scalar: Var<'t, T>,
    },
}

impl<'t, T: Real> PoolGraph<'t, T> {
    pub fn insert(
        tape: &'t Tape<T>,
        params: &PoolParams<T>,
        trainable: bool,
    ) -> Result<Self, TensorError> {
        let rec = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        Ok(match params {
            PoolParams::Average => PoolGraph::Average,
            PoolParams::AttentionA => PoolGraph::AttentionA,
            PoolParams::AttentionB { proj } => {
                PoolGraph::AttentionB { weight: rec(&proj.weight), bias: rec(&proj.bias) }
            }
            PoolParams::AttentionC { scorer } => {
                let w1 = rec(&scorer.layer1.weight);
                let w2 = rec(&scorer.layer2.weight);
                // The scorer's final bias is stored as a length-1 vector
                // parameter; the graph consumes it as a scalar.
                let b2 = rec(&scorer.layer2.bias);
                PoolGraph::AttentionC {
                    w1,
                    w1_t: w1.transpose()?,
                    b1: rec(&scorer.layer1.bias),
                    w2,
                    w2_row: w2.row(0)?,
                    b2,
                    b2_scalar: b2.mean_all(),
                }
            }
        })
    }

    /// Parameter vars in the same order as `PoolParams::tensors`.
    pub fn param_vars(&self) -> Vec<Var<'t, T>> {
        match self {
            PoolGraph::Average | PoolGraph::AttentionA => Vec::new(),
            PoolGraph::AttentionB { weight, bias } => vec![*weight, *bias],
            PoolGraph::AttentionC { w1, b1, w2, b2, .. } => vec![*w1, *b1, *w2, *b2],
        }
    }

    /// Pools the face matrix `f` (n × D_f). `context` is the encoded
    /// global feature, required by AttentionA/B and ignored otherwise.
    /// Returns (pooled D_f vector, attention weights over the n faces).
    pub fn pool(
        &self,
        f: Var<'t, T>,
        context: Option<Var<'t, T>>,
        opts: &PoolOptions,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        let tape = f.tape();
        match self {
            PoolGraph::Average => {
                let n = match f.shape() {
                    Shape::Matrix(n, _) => n,
                    other => {
                        return Err(TensorError::invalid(
                            "pool_average",
                            format!("faces are {other}, expected a matrix"),
                        ))
                    }
                };
                let w = tape.leaf(Tensor::full(
                    Shape::Vector(n),
                    T::one() / T::from_usize(n),
                ));
                Ok((w.weighted_row_sum(f)?, w))
            }
            PoolGraph::AttentionA => {
                let g = context.ok_or_else(|| {
                    TensorError::invalid("pool", "attention_a requires a context vector")
                })?;
                score_pool(f, g, opts)
            }
            PoolGraph::AttentionB { weight, bias } => {
                let g = context.ok_or_else(|| {
                    TensorError::invalid("pool", "attention_b requires a context vector")
                })?;
                let mut q = weight.matvec(g)?.add(*bias)?;
                if opts.relu_query {
                    q = q.relu();
                }
                score_pool(f, q, opts)
            }
            PoolGraph::AttentionC { w1_t, b1, w2_row, b2_scalar, .. } => {
                let hidden = f.matmul(*w1_t)?.add_row_broadcast(*b1)?.relu();
                let scores = hidden.matvec(*w2_row)?.add_scalar_broadcast(*b2_scalar)?;
                let weights = scores.softmax()?;
                Ok((weights.weighted_row_sum(f)?, weights))
            }
        }
    }
}

/// Dot-product attention shared by A and B: scores = F·q, softmax,
/// weighted row sum.
fn score_pool<'t, T: Real>(
    f: Var<'t, T>,
    q: Var<'t, T>,
    opts: &PoolOptions,
) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
    let mut scores = f.matvec(q)?;
    if opts.scaled_scores {
        let d = match f.shape() {
            Shape::Matrix(_, d) => d,
            _ => unreachable!("matvec succeeded"),
        };
        scores = scores.scale(T::one() / T::from_usize(d).sqrt());
    }
    let weights = scores.softmax()?;
    Ok((weights.weighted_row_sum(f)?, weights))
}

/// One-shot eval-mode pooling of plain tensors (no gradients): builds a
/// throwaway tape internally. Used by tests and attention-weight dumps.
pub fn pool_eval<T: Real>(
    f: &Tensor<T>,
    context: Option<&Tensor<T>>,
    params: &PoolParams<T>,
    opts: &PoolOptions,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let tape: Tape<T> = Tape::new();
    let graph = PoolGraph::insert(&tape, params, false)?;
    let fv = tape.leaf(f.clone());
    let cv = context.map(|c| tape.leaf(c.clone()));
    let (pooled, weights) = graph.pool(fv, cv, opts)?;
    Ok((pooled.value(), weights.value()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPTS: PoolOptions = PoolOptions { relu_query: false, scaled_scores: false };

    fn close_all(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn average_single_face_is_identity() {
        let f = Tensor::matrix(1, 2, vec![1., 2.]).unwrap();
        let (pooled, w) = pool_eval::<f32>(&f, None, &PoolParams::Average, &OPTS).unwrap();
        assert_eq!(pooled.data(), &[1., 2.]);
        assert_eq!(w.data(), &[1.]);
    }

    #[test]
    fn average_is_column_mean() {
        let f = Tensor::matrix(2, 2, vec![0., 2., 2., 0.]).unwrap();
        let (pooled, w) = pool_eval::<f32>(&f, None, &PoolParams::Average, &OPTS).unwrap();
        assert_eq!(pooled.data(), &[1., 1.]);
        assert_eq!(w.data(), &[0.5, 0.5]);
    }

    #[test]
    fn average_matches_direct_summation_oracle() {
        let mut rng = CounterRng::new(21);
        let (n, d) = (5, 8);
        let data: Vec<f32> = (0..n * d).map(|_| rng.next_normal() as f32).collect();
        let f = Tensor::matrix(n, d, data.clone()).unwrap();
        let (pooled, _) = pool_eval::<f32>(&f, None, &PoolParams::Average, &OPTS).unwrap();
        for c in 0..d {
            let mean: f32 = (0..n).map(|r| data[r * d + c]).sum::<f32>() / n as f32;
            assert!((pooled.data()[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_a_softmax_of_dot_scores() {
        // F = I₂, g = e₀ → scores [1, 0] → weights softmax([1,0]).
        let f = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let g = Tensor::vector(vec![1., 0.]).unwrap();
        let (pooled, w) =
            pool_eval::<f32>(&f, Some(&g), &PoolParams::AttentionA, &OPTS).unwrap();
        close_all(w.data(), &[0.73106, 0.26894], 1e-5);
        close_all(pooled.data(), &[0.73106, 0.26894], 1e-5);
    }

    #[test]
    fn attention_a_identical_rows_pool_to_that_row() {
        let f = Tensor::matrix(3, 2, vec![0.4, -1.0, 0.4, -1.0, 0.4, -1.0]).unwrap();
        let g = Tensor::vector(vec![2.0, 0.5]).unwrap();
        let (pooled, w) =
            pool_eval::<f32>(&f, Some(&g), &PoolParams::AttentionA, &OPTS).unwrap();
        close_all(w.data(), &[1. / 3.; 3], 1e-7);
        close_all(pooled.data(), &[0.4, -1.0], 1e-6);
    }

    #[test]
    fn attention_a_orthogonal_context_reduces_to_mean() {
        // g ⟂ every row → all scores 0 → uniform weights.
        let f = Tensor::matrix(2, 2, vec![1., 0., 3., 0.]).unwrap();
        let g = Tensor::vector(vec![0., 1.]).unwrap();
        let (pooled, w) =
            pool_eval::<f32>(&f, Some(&g), &PoolParams::AttentionA, &OPTS).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        close_all(pooled.data(), &[2., 0.], 1e-6);
    }

    #[test]
    fn attention_a_requires_context_and_matching_dims() {
        let f = Tensor::matrix(2, 3, vec![0.; 6]).unwrap();
        assert!(pool_eval::<f32>(&f, None, &PoolParams::AttentionA, &OPTS).is_err());
        let g = Tensor::vector(vec![0.; 2]).unwrap();
        assert!(pool_eval::<f32>(&f, Some(&g), &PoolParams::AttentionA, &OPTS).is_err());
    }

    #[test]
    fn attention_b_zero_projection_reduces_to_average() {
        let mut rng = CounterRng::new(22);
        let f = Tensor::matrix(4, 3, (0..12).map(|_| rng.next_normal() as f32).collect())
            .unwrap();
        let g = Tensor::vector(vec![5., -2.]).unwrap();
        let params = PoolParams::AttentionB {
            proj: LinearLayer {
                weight: Tensor::zeros(Shape::Matrix(3, 2)),
                bias: Tensor::zeros(Shape::Vector(3)),
            },
        };
        let (pooled, w) = pool_eval::<f32>(&f, Some(&g), &params, &OPTS).unwrap();
        let (avg, wa) = pool_eval::<f32>(&f, None, &PoolParams::Average, &OPTS).unwrap();
        close_all(w.data(), wa.data(), 1e-7);
        close_all(pooled.data(), avg.data(), 1e-6);
    }

    #[test]
    fn attention_b_identity_projection_reduces_to_attention_a() {
        let mut rng = CounterRng::new(23);
        let d = 4;
        let f = Tensor::matrix(3, d, (0..3 * d).map(|_| rng.next_normal() as f32).collect())
            .unwrap();
        let g = Tensor::vector((0..d).map(|_| rng.next_normal() as f32).collect()).unwrap();
        let mut eye = Tensor::zeros(Shape::Matrix(d, d));
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let params = PoolParams::AttentionB {
            proj: LinearLayer { weight: eye, bias: Tensor::zeros(Shape::Vector(d)) },
        };
        let (pb, wb) = pool_eval::<f32>(&f, Some(&g), &params, &OPTS).unwrap();
        let (pa, wa) = pool_eval::<f32>(&f, Some(&g), &PoolParams::AttentionA, &OPTS).unwrap();
        close_all(wb.data(), wa.data(), 1e-6);
        close_all(pb.data(), pa.data(), 1e-6);
    }

    #[test]
    fn attention_b_matches_two_step_oracle() {
        let mut rng = CounterRng::new(24);
        let (n, df, dg) = (4, 3, 5);
        let f = Tensor::matrix(n, df, (0..n * df).map(|_| rng.next_normal() as f32).collect())
            .unwrap();
        let g =
            Tensor::vector((0..dg).map(|_| rng.next_normal() as f32).collect()).unwrap();
        let proj = LinearLayer::<f32>::init(df, dg, &mut rng);
        let params = PoolParams::AttentionB { proj: proj.clone() };
        let (pooled, w) = pool_eval::<f32>(&f, Some(&g), &params, &OPTS).unwrap();

        // Oracle step 1: explicit q = W·g + b.
        let mut q = vec![0.0f32; df];
        for i in 0..df {
            for j in 0..dg {
                q[i] += proj.weight.at(i, j) * g.data()[j];
            }
            q[i] += proj.bias.data()[i];
        }
        // Oracle step 2: attention-A formula with q as query.
        let qt = Tensor::vector(q).unwrap();
        let (p2, w2) = pool_eval::<f32>(&f, Some(&qt), &PoolParams::AttentionA, &OPTS).unwrap();
        close_all(w.data(), w2.data(), 1e-6);
        close_all(pooled.data(), p2.data(), 1e-6);
    }

    #[test]
    fn attention_c_constant_scores_reduce_to_average() {
        // Zero layer weights + equal biases → identical scores per face.
        let params = PoolParams::AttentionC {
            scorer: ScorerParams {
                layer1: LinearLayer {
                    weight: Tensor::zeros(Shape::Matrix(4, 3)),
                    bias: Tensor::full(Shape::Vector(4), 0.7f32),
                },
                layer2: LinearLayer {
                    weight: Tensor::zeros(Shape::Matrix(1, 4)),
                    bias: Tensor::full(Shape::Vector(1), -0.3),
                },
            },
        };
        let mut rng = CounterRng::new(25);
        let f = Tensor::matrix(5, 3, (0..15).map(|_| rng.next_normal() as f32).collect())
            .unwrap();
        let (pooled, w) = pool_eval::<f32>(&f, None, &params, &OPTS).unwrap();
        close_all(w.data(), &[0.2; 5], 1e-7);
        let (avg, _) = pool_eval::<f32>(&f, None, &PoolParams::Average, &OPTS).unwrap();
        close_all(pooled.data(), avg.data(), 1e-6);
    }

    #[test]
    fn attention_c_large_gain_concentrates_on_max_coordinate() {
        // Scorer ≈ 1e3 · x[0]: hidden layer copies +x0 (relu kills the
        // negative half, so use a positive-only readout of coordinate 0).
        let mut w1 = Tensor::zeros(Shape::Matrix(2, 3));
        w1.data_mut()[0] = 1e3; // hidden unit 0 = relu(1e3·x0)
        w1.data_mut()[3] = -1e3; // hidden unit 1 = relu(−1e3·x0)
        let mut w2 = Tensor::zeros(Shape::Matrix(1, 2));
        w2.data_mut()[0] = 1.0;
        w2.data_mut()[1] = -1.0; // score = 1e3·x0 for either sign
        let params = PoolParams::AttentionC {
            scorer: ScorerParams {
                layer1: LinearLayer { weight: w1, bias: Tensor::zeros(Shape::Vector(2)) },
                layer2: LinearLayer { weight: w2, bias: Tensor::zeros(Shape::Vector(1)) },
            },
        };
        let f = Tensor::matrix(
            3,
            3,
            vec![0.1, 5.0, -1.0, 0.9, -2.0, 3.0, 0.3, 1.0, 1.0],
        )
        .unwrap();
        let (_, w) = pool_eval::<f32>(&f, None, &params, &OPTS).unwrap();
        assert!(w.data()[1] > 0.99, "weights {:?}", w.data());
    }

    #[test]
    fn pooled_lies_in_convex_hull_of_rows() {
        let mut rng = CounterRng::new(26);
        for params in [
            PoolParams::Average,
            PoolParams::AttentionA,
            PoolParams::AttentionB { proj: LinearLayer::init(4, 4, &mut rng) },
            PoolParams::AttentionC { scorer: ScorerParams::init(4, 6, &mut rng) },
        ] {
            let (n, d) = (5, 4);
            let f = Tensor::matrix(n, d, (0..n * d).map(|_| rng.next_normal() as f32).collect())
                .unwrap();
            let g = Tensor::vector((0..d).map(|_| rng.next_normal() as f32).collect()).unwrap();
            let (pooled, w) = pool_eval::<f32>(&f, Some(&g), &params, &OPTS).unwrap();
            let sum: f32 = w.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(w.data().iter().all(|&x| x >= 0.0));
            for c in 0..d {
                let col: Vec<f32> = (0..n).map(|r| f.at(r, c)).collect();
                let min = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let max = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert!(pooled.data()[c] >= min - 1e-6 && pooled.data()[c] <= max + 1e-6);
            }
        }
    }

    #[test]
    fn mechanism_kind_parses_shorthand_spellings() {
        assert_eq!("average".parse::<MechanismKind>().unwrap(), MechanismKind::Average);
        assert_eq!("a".parse::<MechanismKind>().unwrap(), MechanismKind::AttentionA);
        assert_eq!("B".parse::<MechanismKind>().unwrap(), MechanismKind::AttentionB);
        assert_eq!("attention_c".parse::<MechanismKind>().unwrap(), MechanismKind::AttentionC);
        assert!("z".parse::<MechanismKind>().is_err());
    }
}
