//! Dense n-dimensional tensors over `f32` (model precision) or `f64`
//! (verification precision).
//!
//! Storage is a flat row-major buffer plus a shape vector. A tensor may carry
//! an optional gradient buffer of identical shape; training fills it via
//! backprop and the optimizers consume it. All values are required to stay
//! finite - a NaN/Inf anywhere is an error state, not a silent value.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Element type for tensors and network math.
///
/// `f32` is the model precision (weights, activations, serialized blobs);
/// `f64` is used for gradient verification and statistics. Reductions inside
/// kernels always accumulate in `f64` regardless of `T`.
pub trait Scalar:
    Float + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_real(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_real(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_real(self) -> f64 {
        self
    }
}

/// Dense tensor: `shape`, flat row-major `data`, optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, validating that the data length matches the shape and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor {
            shape,
            data,
            grad: None,
        };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            grad: None,
        }
    }

    /// Construct without the finiteness scan. For kernel outputs whose
    /// inputs were already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Accumulate `delta` into the gradient slot, allocating zeros on first
    /// use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} for tensor of {} elements",
                delta.len(),
                self.data.len()
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    /// Convert element type (used to lift an `f32` network to `f64` for
    /// gradient verification).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_real(v.to_real())).collect(),
            grad: None,
        }
    }
}
