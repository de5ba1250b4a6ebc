//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Values are immutable [`Tensor`]s whose buffers are shared behind an `Arc`,
//! so they are cheap to clone and safe to send between threads. Differentiable
//! computation happens on a [`Tape`]: every primitive pushes a node holding its
//! output value plus a backward rule, and [`Tape::backward`] replays the nodes
//! in reverse creation order.
//!
//! All primitives are generic over [`Scalar`], implemented for `f32` (training
//! and inference) and `f64` (gradient checking).
//!
//! Every kernel partitions work by output slice and sums in a fixed order, so
//! results are bit-identical regardless of the rayon thread count.

mod activation;
mod contract;
mod conv;
mod dropout;
mod elementwise;
pub mod gradcheck;
mod norm;
mod pool;
mod reduce;
mod shape_ops;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use contract::Contraction;
pub use conv::Conv3dOpts;
pub use dropout::{dropout_mask, DropoutMode};
pub use gradcheck::{grad_check, grad_check_many, rel_error, GradCheckOpts, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Tape, Var};

/// Floating-point element type usable on the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Immutable dense N-d array, row-major with the last axis fastest.
///
/// The canonical 5-d layout is `[batch, channels, depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() needs one element, tensor has shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer viewed under a different shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max))
    }

    /// Interprets a rank-5 tensor as `[b, c, d, h, w]`.
    pub(crate) fn dims5(&self, op: &str) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[b, c, d, h, w] => Ok([b, c, d, h, w]),
            other => Err(Error::Shape(format!(
                "{op} expects a rank-5 [B,C,D,H,W] tensor, got {other:?}"
            ))),
        }
    }
}
