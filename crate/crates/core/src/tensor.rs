//! Dense tensors of rank 0, 1, or 2 — the numeric carrier for the whole
//! crate.
//!
//! Model state is `Tensor<f32>`; the finite-difference oracle re-runs the
//! same code as `Tensor<f64>`, which is why everything is generic over
//! [`Real`].

use std::fmt;

/// Floating-point scalar the numeric code is generic over.
///
/// `f32` is used for model state and training; `f64` for the
/// finite-difference gradient oracle, where 32-bit cancellation would
/// swamp the 1e-4 tolerance.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Shape of a tensor: scalar, vector, or row-major matrix. All dimensions
/// are positive; empty tensors are rejected at construction.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Shape::Scalar => 0,
            Shape::Vector(_) => 1,
            Shape::Matrix(_, _) => 2,
        }
    }

    /// Dimensions as a list (empty for a scalar), as serialized in
    /// checkpoints.
    pub fn dims(self) -> Vec<usize> {
        match self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self, TensorError> {
        match dims {
            [] => Ok(Shape::Scalar),
            [n] => Ok(Shape::Vector(*n)),
            [r, c] => Ok(Shape::Matrix(*r, *c)),
            _ => Err(TensorError::invalid(
                "shape",
                format!("rank {} unsupported (max 2)", dims.len()),
            )),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    pub fn mismatch(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        TensorError::ShapeMismatch { op, lhs, rhs }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }
}

/// Row-major dense tensor. Construction checks that the payload length
/// matches the shape and that every dimension is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        match shape {
            Shape::Vector(0) | Shape::Matrix(0, _) | Shape::Matrix(_, 0) => {
                return Err(TensorError::invalid(
                    "tensor",
                    format!("zero dimension in shape {shape}"),
                ));
            }
            _ => {}
        }
        if shape.len() != data.len() {
            return Err(TensorError::invalid(
                "tensor",
                format!("shape {shape} expects {} elements, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: Vec<T>) -> Result<Self, TensorError> {
        Tensor::new(Shape::Vector(data.len()), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    /// Matrix from row slices; rows must be non-empty and equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::invalid("tensor", "no rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(TensorError::invalid(
                    "tensor",
                    format!("row {i} has length {}, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(Shape::Matrix(rows.len(), cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor { shape, data: vec![v; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // positive dimensions are enforced at construction
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.shape, Shape::Scalar);
        self.data[0]
    }

    /// Element (r, c) of a matrix.
    pub fn at(&self, r: usize, c: usize) -> T {
        match self.shape {
            Shape::Matrix(_, cols) => self.data[r * cols + c],
            _ => panic!("at() on non-matrix tensor"),
        }
    }

    /// Row r of a matrix as a slice.
    pub fn row(&self, r: usize) -> &[T] {
        match self.shape {
            Shape::Matrix(_, cols) => &self.data[r * cols..(r + 1) * cols],
            _ => panic!("row() on non-matrix tensor"),
        }
    }

    /// Element-wise cast to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Maximum absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |acc, d| acc.max(d))
    }
}
