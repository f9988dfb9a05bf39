//! Dense row-major tensors over `f32` or `f64`.
//!
//! The training path runs in `f32`; gradient checking re-runs the same
//! graphs in `f64`, so every numeric kernel in this crate is generic
//! over [`Scalar`].

use std::fmt;

use crate::error::{Error, Result};

/// Element types the numeric kernels accept.
///
/// The bound on [`ndarray::LinalgScalar`] routes matrix products through
/// `ndarray`'s optimized GEMM for both precisions.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// A dense row-major tensor.
///
/// The element count always equals the product of the extents; scalars
/// are represented by an empty shape. Images and patches use the layout
/// `[height, width, channels]`, convolution kernels use
/// `[kh, kw, in_channels, out_channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    /// Creates a tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); shape.iter().product()] }
    }

    /// Creates a tensor from existing data, checking the element count.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Creates a rank-0 tensor holding one value.
    pub fn scalar(value: E) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// The extents of the tensor.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements (some extent is zero).
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Read-only view of the elements in row-major order.
    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the elements in row-major order.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Consumes the tensor and returns its elements.
    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Flat offset of `[y, x, c]` in a rank-3 tensor.
    #[inline]
    pub fn offset3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    /// Value at `[y, x, c]` in a rank-3 tensor.
    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> E {
        self.data[self.offset3(y, x, c)]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Adds `other` element-wise into `self`.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Sets every element to zero.
    pub fn fill_zero(&mut self) {
        for v in &mut self.data {
            *v = E::zero();
        }
    }
}
