//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The engine is tape-based: operations record themselves on a [`Tape`] as
//! they execute, and [`Tape::backward`] walks the record in reverse to
//! accumulate gradients with respect to requested leaves. Storage is 32-bit;
//! reductions and log-sum-exp accumulate in 64-bit so finite-difference
//! verification stays stable at small scales.

mod check;
mod kernels;
mod tape;

pub use check::{grad_check, GradReport};
pub use tape::{NodeId, Tape, IGNORE_INDEX};

use std::sync::Arc;

use thiserror::Error;

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("shape {shape:?} contains a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    RootNotScalar { shape: Vec<usize> },
    #[error("gradient requested for node {node} which is not a tape leaf")]
    NotALeaf { node: usize },
    #[error("cross_entropy: every target position is ignored")]
    EmptyTargets,
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Immutable dense tensor: a shape and row-major f32 storage.
///
/// Data is shared behind an `Arc`, so clones are cheap and tensors are safe
/// to hand out across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor_new" });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernel outputs already known to be finite-checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        assert!(value.is_finite(), "Tensor::full requires a finite value");
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![value; numel])
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f32) -> Self {
        assert!(value.is_finite(), "Tensor::scalar requires a finite value");
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The single element of a scalar (one-element) tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Matrix rows for a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Matrix columns for a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Arithmetic shared by the f32 execution path and the f64 replay path.
pub(crate) trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(x: f32) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, other: Self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(x: f32) -> Self {
        x
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
}
