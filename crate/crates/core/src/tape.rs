//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application in topological order; a
//! [`Var`] is a cheap copyable handle (tape reference + node index) to one
//! recorded value. [`Tape::backward`] replays the tape once in reverse,
//! accumulating gradients additively across fan-out.
//!
//! Conventions used throughout:
//! - matrices are row-major; weight matrices are stored `(out × in)`;
//! - gradients are only propagated into nodes whose ancestry contains a
//!   parameter (`requires_grad`), so data leaves cost nothing in backward;
//! - forward primitives applied to finite inputs never produce NaN:
//!   softmax subtracts the max, cross-entropy clamps probabilities at
//!   1e-12, batch-norm adds epsilon inside the square root.

use std::cell::RefCell;

use crate::rng::CounterRng;
use crate::tensor::{Real, Shape, Tensor, TensorError};

/// Probability clamp for cross-entropy: loss = −ln(max(p, EPS_CE)).
pub const EPS_CE: f64 = 1e-12;

/// Recorded computation graph. Nodes are append-only; inputs always
/// precede the operations that consume them.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One recorded primitive. Variants store input node indices plus whatever
/// forward by-products the backward pass needs (masks, normalized values).
enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Scale(usize, T),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    MatVec(usize, usize),
    Dot(usize, usize),
    ConcatVec(usize, usize),
    ConcatCols(usize, usize),
    StackRows(Vec<usize>),
    Row(usize, usize),
    WeightedRowSum(usize, usize),
    AddRowBroadcast(usize, usize),
    AddScalarBroadcast(usize, usize),
    Softmax(usize),
    SoftmaxRows(usize),
    CrossEntropy { probs: usize, label: usize },
    CrossEntropyRows { probs: usize, labels: Vec<usize> },
    MeanAll(usize),
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T> },
    Dropout { x: usize, mask: Vec<T> },
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} ({})", self.idx, self.shape())
    }
}

/// Per-feature running statistics maintained by train-mode batch norm and
/// consumed by eval-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnRunning<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(dim: usize) -> Self {
        BnRunning { mean: vec![T::zero(); dim], var: vec![T::one(); dim] }
    }

    pub fn cast<U: Real>(&self) -> BnRunning<U> {
        BnRunning {
            mean: self.mean.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            var: self.var.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v` (zeros if `v` is not an ancestor of
    /// the loss or does not require gradient).
    pub fn wrt(&self, v: Var<'_, T>) -> &Tensor<T> {
        &self.grads[v.idx]
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record a constant input; backward never propagates into it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Record a parameter input; backward produces its gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn shape_of(&self, idx: usize) -> Shape {
        self.nodes.borrow()[idx].value.shape()
    }

    fn requires(&self, indices: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        indices.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Stack equal-length vectors into a matrix, one input per row.
    pub fn stack_rows(&self, rows: &[Var<'_, T>]) -> Result<Var<'_, T>, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::invalid("stack_rows", "no rows"));
        }
        let indices: Vec<usize> = rows.iter().map(|v| v.idx).collect();
        let (data, cols) = {
            let nodes = self.nodes.borrow();
            let first = nodes[indices[0]].value.shape();
            let cols = match first {
                Shape::Vector(n) => n,
                other => {
                    return Err(TensorError::invalid(
                        "stack_rows",
                        format!("row 0 is {other}, expected a vector"),
                    ))
                }
            };
            let mut data = Vec::with_capacity(indices.len() * cols);
            for (r, &i) in indices.iter().enumerate() {
                let t = &nodes[i].value;
                if t.shape() != Shape::Vector(cols) {
                    return Err(TensorError::invalid(
                        "stack_rows",
                        format!("row {r} is {}, expected {}", t.shape(), Shape::Vector(cols)),
                    ));
                }
                data.extend_from_slice(t.data());
            }
            (data, cols)
        };
        let value = Tensor::new(Shape::Matrix(indices.len(), cols), data)?;
        let rg = self.requires(&indices);
        Ok(self.push(value, Op::StackRows(indices), rg))
    }

    /// Train-mode batch normalization over rows (samples) of `x`, one
    /// statistic per column (feature). Uses the biased (population)
    /// variance with `eps` inside the square root, and updates `running`
    /// in place with momentum `momentum` (new = (1−m)·old + m·batch).
    /// Requires at least two rows.
    pub fn batch_norm_train<'t>(
        &'t self,
        x: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running: &mut BnRunning<T>,
        momentum: T,
        eps: T,
    ) -> Result<Var<'t, T>, TensorError> {
        let (rows, cols) = self.bn_check("batch_norm_train", x, gamma, beta, running)?;
        if rows < 2 {
            return Err(TensorError::invalid(
                "batch_norm_train",
                format!("batch size {rows} < 2; train-mode statistics need at least 2 rows"),
            ));
        }
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.idx].value.data();
            let g = nodes[gamma.idx].value.data();
            let b = nodes[beta.idx].value.data();
            let n = T::from_usize(rows);
            let mut mean = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    mean[c] += xd[r * cols + c];
                }
            }
            for m in mean.iter_mut() {
                *m = *m / n;
            }
            let mut var = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    let d = xd[r * cols + c] - mean[c];
                    var[c] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v / n;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); rows * cols];
            let mut out = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let h = (xd[r * cols + c] - mean[c]) * inv_std[c];
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = g[c] * h + b[c];
                }
            }
            let keep = T::one() - momentum;
            for c in 0..cols {
                running.mean[c] = keep * running.mean[c] + momentum * mean[c];
                running.var[c] = keep * running.var[c] + momentum * var[c];
            }
            (out, xhat, inv_std)
        };
        let value = Tensor::new(Shape::Matrix(rows, cols), out)?;
        let rg = self.requires(&[x.idx, gamma.idx, beta.idx]);
        Ok(self.push(
            value,
            Op::BatchNormTrain { x: x.idx, gamma: gamma.idx, beta: beta.idx, xhat, inv_std },
            rg,
        ))
    }

    /// Eval-mode batch normalization: normalizes each column with the
    /// frozen running statistics. Deterministic; accepts any batch size.
    pub fn batch_norm_eval<'t>(
        &'t self,
        x: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running: &BnRunning<T>,
        eps: T,
    ) -> Result<Var<'t, T>, TensorError> {
        let (rows, cols) = self.bn_check("batch_norm_eval", x, gamma, beta, running)?;
        let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running.mean.clone();
        let out = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.idx].value.data();
            let g = nodes[gamma.idx].value.data();
            let b = nodes[beta.idx].value.data();
            let mut out = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = g[c] * (xd[r * cols + c] - mean[c]) * inv_std[c] + b[c];
                }
            }
            out
        };
        let value = Tensor::new(Shape::Matrix(rows, cols), out)?;
        let rg = self.requires(&[x.idx, gamma.idx, beta.idx]);
        Ok(self.push(
            value,
            Op::BatchNormEval { x: x.idx, gamma: gamma.idx, beta: beta.idx, mean, inv_std },
            rg,
        ))
    }

    fn bn_check(
        &self,
        op: &'static str,
        x: Var<'_, T>,
        gamma: Var<'_, T>,
        beta: Var<'_, T>,
        running: &BnRunning<T>,
    ) -> Result<(usize, usize), TensorError> {
        let (rows, cols) = match self.shape_of(x.idx) {
            Shape::Matrix(r, c) => (r, c),
            other => {
                return Err(TensorError::invalid(op, format!("input is {other}, expected a matrix")))
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape_of(v.idx);
            if s != Shape::Vector(cols) {
                return Err(TensorError::invalid(
                    op,
                    format!("{name} is {s}, expected {}", Shape::Vector(cols)),
                ));
            }
        }
        if running.mean.len() != cols || running.var.len() != cols {
            return Err(TensorError::invalid(
                op,
                format!(
                    "running stats have {} features, input has {cols}",
                    running.mean.len()
                ),
            ));
        }
        Ok((rows, cols))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by 1/(1−p), so eval-time inference is the
    /// identity (and is simply not recorded). Consumes one `f64` draw per
    /// element in row-major order.
    pub fn dropout<'t>(
        &'t self,
        x: Var<'t, T>,
        p: f64,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, T>, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid(
                "dropout",
                format!("drop probability {p} outside [0, 1)"),
            ));
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let (out, mask) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.idx].value.data();
            let mut mask = Vec::with_capacity(xd.len());
            let mut out = Vec::with_capacity(xd.len());
            for &v in xd {
                let m = if rng.next_f64() < p { T::zero() } else { scale };
                mask.push(m);
                out.push(v * m);
            }
            (out, mask)
        };
        let shape = self.shape_of(x.idx);
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(&[x.idx]);
        Ok(self.push(value, Op::Dropout { x: x.idx, mask }, rg))
    }

    /// Smallest |x| over the inputs of every relu recorded so far, or
    /// `None` when the graph has no relus. Gradient-verification suites
    /// use this to spot evaluation points sitting near the kink, where a
    /// finite difference and the subgradient legitimately disagree.
    pub fn min_relu_input_abs(&self) -> Option<T> {
        let nodes = self.nodes.borrow();
        let mut min: Option<T> = None;
        for node in nodes.iter() {
            if let Op::Relu(input) = node.op {
                for &x in nodes[input].value.data() {
                    let a = x.abs();
                    min = Some(match min {
                        Some(m) if m <= a => m,
                        _ => a,
                    });
                }
            }
        }
        min
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively
    /// across fan-out; nodes that do not require gradient are skipped.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.shape() != Shape::Scalar {
            return Err(TensorError::invalid(
                "backward",
                format!("loss is {}, expected a scalar", nodes[loss.idx].value.shape()),
            ));
        }
        let mut grads: Vec<Tensor<T>> =
            nodes.iter().map(|n| Tensor::zeros(n.value.shape())).collect();
        grads[loss.idx].data_mut()[0] = T::one();
        for idx in (0..=loss.idx).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            // Inputs strictly precede idx, so the output gradient and all
            // input gradients live on opposite sides of this split.
            let (lo, hi) = grads.split_at_mut(idx);
            let go = hi[0].data().to_vec();
            backprop(&nodes, idx, &go, lo);
        }
        drop(nodes);
        Ok(Gradients { grads })
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// The tape this value is recorded on.
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.tape.shape_of(self.idx)
    }

    /// The value of a scalar node.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        value: Tensor<T>,
        op: Op<T>,
    ) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.idx, rhs.idx]);
        self.tape.push(value, op, rg)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.idx]);
        self.tape.push(value, op, rg)
    }

    /// Element-wise sum of same-shape tensors.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            if a.shape() != b.shape() {
                return Err(TensorError::mismatch("add", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.binary(rhs, out, Op::Add(self.idx, rhs.idx)))
    }

    /// Multiplication by a compile-time constant (not a tape value).
    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            Tensor::new(a.shape(), a.data().iter().map(|&x| x * c).collect()).expect("same shape")
        };
        self.unary(out, Op::Scale(self.idx, c))
    }

    /// Rectified linear unit, element-wise max(x, 0). The subgradient at 0
    /// is taken as 0.
    pub fn relu(self) -> Var<'t, T> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            Tensor::new(a.shape(), a.data().iter().map(|&x| x.max(T::zero())).collect())
                .expect("same shape")
        };
        self.unary(out, Op::Relu(self.idx))
    }

    /// Matrix product (m×k)·(k×n) → (m×n).
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            let (m, k, k2, n) = match (a.shape(), b.shape()) {
                (Shape::Matrix(m, k), Shape::Matrix(k2, n)) => (m, k, k2, n),
                (sa, sb) => return Err(TensorError::mismatch("matmul", sa, sb)),
            };
            if k != k2 {
                return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
            }
            Tensor::new(Shape::Matrix(m, n), matmul_data(a.data(), b.data(), m, k, n))?
        };
        Ok(self.binary(rhs, out, Op::MatMul(self.idx, rhs.idx)))
    }

    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let (r, c) = match a.shape() {
                Shape::Matrix(r, c) => (r, c),
                other => {
                    return Err(TensorError::invalid(
                        "transpose",
                        format!("input is {other}, expected a matrix"),
                    ))
                }
            };
            let ad = a.data();
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ad[i * c + j];
                }
            }
            Tensor::new(Shape::Matrix(c, r), data)?
        };
        Ok(self.unary(out, Op::Transpose(self.idx)))
    }

    /// Matrix–vector product (m×k)·(k) → (m).
    pub fn matvec(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, x) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            let (m, k) = match (a.shape(), x.shape()) {
                (Shape::Matrix(m, k), Shape::Vector(k2)) if k == k2 => (m, k),
                (sa, sb) => return Err(TensorError::mismatch("matvec", sa, sb)),
            };
            let (ad, xd) = (a.data(), x.data());
            let mut data = vec![T::zero(); m];
            for i in 0..m {
                let row = &ad[i * k..(i + 1) * k];
                let mut acc = T::zero();
                for p in 0..k {
                    acc += row[p] * xd[p];
                }
                data[i] = acc;
            }
            Tensor::new(Shape::Vector(m), data)?
        };
        Ok(self.binary(rhs, out, Op::MatVec(self.idx, rhs.idx)))
    }

    /// Inner product of equal-length vectors → scalar.
    pub fn dot(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            match (a.shape(), b.shape()) {
                (Shape::Vector(n), Shape::Vector(n2)) if n == n2 => {}
                (sa, sb) => return Err(TensorError::mismatch("dot", sa, sb)),
            }
            let mut acc = T::zero();
            for (&x, &y) in a.data().iter().zip(b.data()) {
                acc += x * y;
            }
            Tensor::scalar(acc)
        };
        Ok(self.binary(rhs, out, Op::Dot(self.idx, rhs.idx)))
    }

    /// Concatenation of two vectors.
    pub fn concat(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            match (a.shape(), b.shape()) {
                (Shape::Vector(_), Shape::Vector(_)) => {}
                (sa, sb) => return Err(TensorError::mismatch("concat", sa, sb)),
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::vector(data)?
        };
        Ok(self.binary(rhs, out, Op::ConcatVec(self.idx, rhs.idx)))
    }

    /// Column-wise concatenation of matrices with equal row counts:
    /// (r×p | r×q) → r×(p+q).
    pub fn concat_cols(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            let (r, p, q) = match (a.shape(), b.shape()) {
                (Shape::Matrix(r, p), Shape::Matrix(r2, q)) if r == r2 => (r, p, q),
                (sa, sb) => return Err(TensorError::mismatch("concat_cols", sa, sb)),
            };
            let (ad, bd) = (a.data(), b.data());
            let mut data = Vec::with_capacity(r * (p + q));
            for i in 0..r {
                data.extend_from_slice(&ad[i * p..(i + 1) * p]);
                data.extend_from_slice(&bd[i * q..(i + 1) * q]);
            }
            Tensor::new(Shape::Matrix(r, p + q), data)?
        };
        Ok(self.binary(rhs, out, Op::ConcatCols(self.idx, rhs.idx)))
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(self, r: usize) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let rows = match a.shape() {
                Shape::Matrix(rows, _) => rows,
                other => {
                    return Err(TensorError::invalid(
                        "row",
                        format!("input is {other}, expected a matrix"),
                    ))
                }
            };
            if r >= rows {
                return Err(TensorError::invalid(
                    "row",
                    format!("row index {r} out of range for {}", a.shape()),
                ));
            }
            Tensor::vector(a.row(r).to_vec())?
        };
        Ok(self.unary(out, Op::Row(self.idx, r)))
    }

    /// Weighted sum of matrix rows: (w: n, F: n×d) → Σᵢ wᵢ·Fᵢ, a d-vector.
    pub fn weighted_row_sum(self, f: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (w, fm) = (&nodes[self.idx].value, &nodes[f.idx].value);
            let (n, d) = match (w.shape(), fm.shape()) {
                (Shape::Vector(n), Shape::Matrix(n2, d)) if n == n2 => (n, d),
                (sa, sb) => return Err(TensorError::mismatch("weighted_row_sum", sa, sb)),
            };
            let (wd, fd) = (w.data(), fm.data());
            let mut data = vec![T::zero(); d];
            for i in 0..n {
                let wi = wd[i];
                let row = &fd[i * d..(i + 1) * d];
                for j in 0..d {
                    data[j] += wi * row[j];
                }
            }
            Tensor::vector(data)?
        };
        Ok(self.binary(f, out, Op::WeightedRowSum(self.idx, f.idx)))
    }

    /// Adds a vector to every row of a matrix: (X: r×c, b: c) → r×c.
    pub fn add_row_broadcast(self, bias: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.idx].value, &nodes[bias.idx].value);
            let (r, c) = match (x.shape(), b.shape()) {
                (Shape::Matrix(r, c), Shape::Vector(c2)) if c == c2 => (r, c),
                (sa, sb) => return Err(TensorError::mismatch("add_row_broadcast", sa, sb)),
            };
            let (xd, bd) = (x.data(), b.data());
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(xd[i * c + j] + bd[j]);
                }
            }
            Tensor::new(Shape::Matrix(r, c), data)?
        };
        Ok(self.binary(bias, out, Op::AddRowBroadcast(self.idx, bias.idx)))
    }

    /// Adds a scalar node to every element of a vector.
    pub fn add_scalar_broadcast(self, s: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (x, sv) = (&nodes[self.idx].value, &nodes[s.idx].value);
            match (x.shape(), sv.shape()) {
                (Shape::Vector(_), Shape::Scalar) => {}
                (sa, sb) => return Err(TensorError::mismatch("add_scalar_broadcast", sa, sb)),
            }
            let c = sv.item();
            Tensor::vector(x.data().iter().map(|&v| v + c).collect())?
        };
        Ok(self.binary(s, out, Op::AddScalarBroadcast(self.idx, s.idx)))
    }

    /// Numerically stabilized softmax of a vector: subtracts the max
    /// before exponentiating, so adding a constant to all logits (and
    /// taking softmax of large logits) is safe.
    pub fn softmax(self) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            if x.shape().rank() != 1 {
                return Err(TensorError::invalid(
                    "softmax",
                    format!("input is {}, expected a vector", x.shape()),
                ));
            }
            Tensor::vector(softmax_slice(x.data()))?
        };
        Ok(self.unary(out, Op::Softmax(self.idx)))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(self) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let (r, c) = match x.shape() {
                Shape::Matrix(r, c) => (r, c),
                other => {
                    return Err(TensorError::invalid(
                        "softmax_rows",
                        format!("input is {other}, expected a matrix"),
                    ))
                }
            };
            let xd = x.data();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                data.extend_from_slice(&softmax_slice(&xd[i * c..(i + 1) * c]));
            }
            Tensor::new(Shape::Matrix(r, c), data)?
        };
        Ok(self.unary(out, Op::SoftmaxRows(self.idx)))
    }

    /// Cross-entropy of a probability vector against a class index:
    /// −ln(max(p[label], 1e-12)). The clamp keeps the loss finite; inside
    /// the clamped region the gradient is zero.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.idx].value;
            let n = match p.shape() {
                Shape::Vector(n) => n,
                other => {
                    return Err(TensorError::invalid(
                        "cross_entropy",
                        format!("probs is {other}, expected a vector"),
                    ))
                }
            };
            if label >= n {
                return Err(TensorError::invalid(
                    "cross_entropy",
                    format!("label {label} out of range for {n} classes"),
                ));
            }
            Tensor::scalar(-(p.data()[label].max(T::from_f64(EPS_CE))).ln())
        };
        Ok(self.unary(out, Op::CrossEntropy { probs: self.idx, label }))
    }

    /// Per-row cross-entropy of a (B×C) probability matrix against B class
    /// indices, returning a B-vector of losses.
    pub fn cross_entropy_rows(self, labels: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.idx].value;
            let (r, c) = match p.shape() {
                Shape::Matrix(r, c) => (r, c),
                other => {
                    return Err(TensorError::invalid(
                        "cross_entropy_rows",
                        format!("probs is {other}, expected a matrix"),
                    ))
                }
            };
            if labels.len() != r {
                return Err(TensorError::invalid(
                    "cross_entropy_rows",
                    format!("{} labels for {r} rows", labels.len()),
                ));
            }
            let eps = T::from_f64(EPS_CE);
            let mut data = Vec::with_capacity(r);
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(TensorError::invalid(
                        "cross_entropy_rows",
                        format!("label {y} at row {i} out of range for {c} classes"),
                    ));
                }
                data.push(-(p.data()[i * c + y].max(eps)).ln());
            }
            Tensor::vector(data)?
        };
        Ok(self.unary(out, Op::CrossEntropyRows { probs: self.idx, labels: labels.to_vec() }))
    }

    /// Mean of all elements → scalar.
    pub fn mean_all(self) -> Var<'t, T> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut acc = T::zero();
            for &v in x.data() {
                acc += v;
            }
            Tensor::scalar(acc / T::from_usize(x.len()))
        };
        self.unary(out, Op::MeanAll(self.idx))
    }
}

/// Row-major (m×k)·(k×n) product with an i–k–j loop order so the inner
/// loop walks both operands contiguously.
fn matmul_data<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().fold(x[0], |m, &v| m.max(v));
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &out {
        sum += e;
    }
    for e in out.iter_mut() {
        *e = *e / sum;
    }
    out
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Propagates `go` (the output gradient of node `idx`) into the gradients
/// of its inputs, which all live in `lo` (= grads[..idx]).
fn backprop<T: Real>(nodes: &[Node<T>], idx: usize, go: &[T], lo: &mut [Tensor<T>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                add_assign(lo[*a].data_mut(), go);
            }
            if rg(*b) {
                add_assign(lo[*b].data_mut(), go);
            }
        }
        Op::Scale(a, c) => {
            if rg(*a) {
                for (d, &g) in lo[*a].data_mut().iter_mut().zip(go) {
                    *d += *c * g;
                }
            }
        }
        Op::Relu(a) => {
            if rg(*a) {
                let xv: Vec<T> = nodes[*a].value.data().to_vec();
                for ((d, &g), &x) in lo[*a].data_mut().iter_mut().zip(go).zip(&xv) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = match nodes[*a].value.shape() {
                Shape::Matrix(m, k) => (m, k),
                _ => unreachable!(),
            };
            let n = match nodes[*b].value.shape() {
                Shape::Matrix(_, n) => n,
                _ => unreachable!(),
            };
            if rg(*a) {
                // dA[i,p] += Σ_j go[i,j]·B[p,j]
                let bd = nodes[*b].value.data();
                let da = lo[*a].data_mut();
                for i in 0..m {
                    let grow = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if rg(*b) {
                // dB[p,j] += Σ_i A[i,p]·go[i,j]
                let ad = nodes[*a].value.data();
                let db = lo[*b].data_mut();
                for i in 0..m {
                    let grow = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += av * grow[j];
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                let (r, c) = match nodes[*a].value.shape() {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let da = lo[*a].data_mut();
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += go[j * r + i];
                    }
                }
            }
        }
        Op::MatVec(a, x) => {
            let (m, k) = match nodes[*a].value.shape() {
                Shape::Matrix(m, k) => (m, k),
                _ => unreachable!(),
            };
            if rg(*a) {
                let xd = nodes[*x].value.data();
                let da = lo[*a].data_mut();
                for i in 0..m {
                    let gi = go[i];
                    let drow = &mut da[i * k..(i + 1) * k];
                    for p in 0..k {
                        drow[p] += gi * xd[p];
                    }
                }
            }
            if rg(*x) {
                let ad = nodes[*a].value.data();
                let dx = lo[*x].data_mut();
                for i in 0..m {
                    let gi = go[i];
                    let arow = &ad[i * k..(i + 1) * k];
                    for p in 0..k {
                        dx[p] += gi * arow[p];
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let g = go[0];
            if rg(*a) {
                let bd: Vec<T> = nodes[*b].value.data().to_vec();
                for (d, &bv) in lo[*a].data_mut().iter_mut().zip(&bd) {
                    *d += g * bv;
                }
            }
            if rg(*b) {
                let ad: Vec<T> = nodes[*a].value.data().to_vec();
                for (d, &av) in lo[*b].data_mut().iter_mut().zip(&ad) {
                    *d += g * av;
                }
            }
        }
        Op::ConcatVec(a, b) => {
            let p = nodes[*a].value.len();
            if rg(*a) {
                add_assign(lo[*a].data_mut(), &go[..p]);
            }
            if rg(*b) {
                add_assign(lo[*b].data_mut(), &go[p..]);
            }
        }
        Op::ConcatCols(a, b) => {
            let (r, p) = match nodes[*a].value.shape() {
                Shape::Matrix(r, p) => (r, p),
                _ => unreachable!(),
            };
            let q = match nodes[*b].value.shape() {
                Shape::Matrix(_, q) => q,
                _ => unreachable!(),
            };
            let w = p + q;
            if rg(*a) {
                let da = lo[*a].data_mut();
                for i in 0..r {
                    add_assign(&mut da[i * p..(i + 1) * p], &go[i * w..i * w + p]);
                }
            }
            if rg(*b) {
                let db = lo[*b].data_mut();
                for i in 0..r {
                    add_assign(&mut db[i * q..(i + 1) * q], &go[i * w + p..(i + 1) * w]);
                }
            }
        }
        Op::StackRows(inputs) => {
            let d = go.len() / inputs.len();
            for (i, &src) in inputs.iter().enumerate() {
                if rg(src) {
                    add_assign(lo[src].data_mut(), &go[i * d..(i + 1) * d]);
                }
            }
        }
        Op::Row(a, r) => {
            if rg(*a) {
                let c = go.len();
                add_assign(&mut lo[*a].data_mut()[r * c..(r + 1) * c], go);
            }
        }
        Op::WeightedRowSum(w, f) => {
            let (n, d) = match nodes[*f].value.shape() {
                Shape::Matrix(n, d) => (n, d),
                _ => unreachable!(),
            };
            if rg(*w) {
                let fd = nodes[*f].value.data();
                let dw = lo[*w].data_mut();
                for i in 0..n {
                    let row = &fd[i * d..(i + 1) * d];
                    let mut acc = T::zero();
                    for j in 0..d {
                        acc += row[j] * go[j];
                    }
                    dw[i] += acc;
                }
            }
            if rg(*f) {
                let wd = nodes[*w].value.data();
                let df = lo[*f].data_mut();
                for i in 0..n {
                    let wi = wd[i];
                    let drow = &mut df[i * d..(i + 1) * d];
                    for j in 0..d {
                        drow[j] += wi * go[j];
                    }
                }
            }
        }
        Op::AddRowBroadcast(x, b) => {
            let c = nodes[*b].value.len();
            if rg(*x) {
                add_assign(lo[*x].data_mut(), go);
            }
            if rg(*b) {
                let db = lo[*b].data_mut();
                for (i, &g) in go.iter().enumerate() {
                    db[i % c] += g;
                }
            }
        }
        Op::AddScalarBroadcast(x, s) => {
            if rg(*x) {
                add_assign(lo[*x].data_mut(), go);
            }
            if rg(*s) {
                let mut acc = T::zero();
                for &g in go {
                    acc += g;
                }
                lo[*s].data_mut()[0] += acc;
            }
        }
        Op::Softmax(a) => {
            if rg(*a) {
                let y = nodes[idx].value.data();
                softmax_backward(y, go, lo[*a].data_mut());
            }
        }
        Op::SoftmaxRows(a) => {
            if rg(*a) {
                let (r, c) = match nodes[idx].value.shape() {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!(),
                };
                let y = nodes[idx].value.data();
                let da = lo[*a].data_mut();
                for i in 0..r {
                    softmax_backward(
                        &y[i * c..(i + 1) * c],
                        &go[i * c..(i + 1) * c],
                        &mut da[i * c..(i + 1) * c],
                    );
                }
            }
        }
        Op::CrossEntropy { probs, label } => {
            if rg(*probs) {
                let p = nodes[*probs].value.data()[*label];
                let eps = T::from_f64(EPS_CE);
                if p > eps {
                    lo[*probs].data_mut()[*label] -= go[0] / p;
                }
            }
        }
        Op::CrossEntropyRows { probs, labels } => {
            if rg(*probs) {
                let c = match nodes[*probs].value.shape() {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!(),
                };
                let eps = T::from_f64(EPS_CE);
                let pv: Vec<T> = nodes[*probs].value.data().to_vec();
                let dp = lo[*probs].data_mut();
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv[i * c + y];
                    if p > eps {
                        dp[i * c + y] -= go[i] / p;
                    }
                }
            }
        }
        Op::MeanAll(a) => {
            if rg(*a) {
                let n = nodes[*a].value.len();
                let g = go[0] / T::from_usize(n);
                for d in lo[*a].data_mut() {
                    *d += g;
                }
            }
        }
        Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
            let (rows, cols) = match nodes[*x].value.shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            let gd = nodes[*gamma].value.data();
            // dxhat = go ⊙ γ (broadcast over rows)
            let mut dxhat = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    dxhat[r * cols + c] = go[r * cols + c] * gd[c];
                }
            }
            if rg(*gamma) {
                let dg = lo[*gamma].data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c] += go[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if rg(*beta) {
                let db = lo[*beta].data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += go[r * cols + c];
                    }
                }
            }
            if rg(*x) {
                // Standard batch-norm input gradient with biased variance:
                // dx = is/B · (B·dxhat − Σ_b dxhat − xhat·Σ_b dxhat⊙xhat)
                let nb = T::from_usize(rows);
                let mut sum_dx = vec![T::zero(); cols];
                let mut sum_dxx = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        sum_dx[c] += dxhat[r * cols + c];
                        sum_dxx[c] += dxhat[r * cols + c] * xhat[r * cols + c];
                    }
                }
                let dx = lo[*x].data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        let term = nb * dxhat[r * cols + c]
                            - sum_dx[c]
                            - xhat[r * cols + c] * sum_dxx[c];
                        dx[r * cols + c] += inv_std[c] / nb * term;
                    }
                }
            }
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let (rows, cols) = match nodes[*x].value.shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            let gd = nodes[*gamma].value.data();
            let xd = nodes[*x].value.data();
            if rg(*x) {
                let dx = lo[*x].data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += go[r * cols + c] * gd[c] * inv_std[c];
                    }
                }
            }
            if rg(*gamma) {
                let dg = lo[*gamma].data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c] += go[r * cols + c] * (xd[r * cols + c] - mean[c]) * inv_std[c];
                    }
                }
            }
            if rg(*beta) {
                let db = lo[*beta].data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += go[r * cols + c];
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if rg(*x) {
                for ((d, &g), &m) in lo[*x].data_mut().iter_mut().zip(go).zip(mask) {
                    *d += g * m;
                }
            }
        }
    }
}

/// dx = y ⊙ (go − ⟨go, y⟩) for y = softmax(x).
fn softmax_backward<T: Real>(y: &[T], go: &[T], dx: &mut [T]) {
    let mut s = T::zero();
    for (&g, &yv) in go.iter().zip(y) {
        s += g * yv;
    }
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(go) {
        *d += yv * (g - s);
    }
}
