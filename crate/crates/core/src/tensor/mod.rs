//! Dense N-dimensional tensors with reverse-mode differentiation.
//!
//! The operator set is deliberately small: dilated 2-D convolution,
//! 2×2 max pooling, 2×2 stride-2 transposed convolution, ReLU, addition,
//! channel duplication, scaling and mean squared error. That is every
//! operator the density-map network needs and nothing more.
//!
//! Storage is generic over [`Real`] so the same kernels run in `f32` for
//! training and inference and in `f64` for finite-difference checks.
//! Convolutions and reductions always accumulate in `f64`.

mod conv;
mod gemm;
mod graph;
mod ops;
mod optim;

use std::fmt;

pub use conv::{conv2d, ConvSpec};
pub use graph::{Gradients, Graph, Var};
pub use ops::{add, dup_channels, max_pool2, mse, relu, upsample2};
pub use optim::{adam_step, count_params, AdamState, LrSchedule};

/// Errors raised by tensor construction and the operators.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {found} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("max_pool2: spatial size {height}x{width} is not even")]
    OddSpatial { height: usize, width: usize },
    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),
    #[error("backward: loss must be a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Scalar storage type of a tensor.
pub trait Real:
    Copy + Default + PartialEq + PartialOrd + fmt::Debug + Send + Sync + 'static
{
    const ZERO: Self;
    fn to_f64(self) -> f64;
    fn from_f64(value: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(value: f64) -> Self {
        value as f32
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(value: f64) -> Self {
        value
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// A dense row-major tensor.
///
/// Activations use the `N×C×H×W` layout and convolution kernels
/// `Cout×Cin×K×K`. Every constructor rejects non-finite entries.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                found: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, rounding into the storage type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    /// # Panics
    /// If any extent is zero or `value` is not finite.
    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        assert!(value.is_finite(), "non-finite fill value");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the elements. Callers are responsible for keeping
    /// the entries finite; operators re-validate their inputs.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Converts the storage type, rounding through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected N×C×H×W, got {:?}", self.shape),
            }),
        }
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Used by kernels whose outputs are finite by construction when their
    /// inputs are; still verified so overflow surfaces as an error.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, op: &'static str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Self { shape, data })
    }
}
