//! Dense n-d arrays over a runtime-switchable float precision.
//!
//! Training and inference run at 32 bits; gradient verification runs the
//! same kernels at 64 bits, where finite differences are trustworthy.

use num_traits::Float;
use std::fmt;

/// Scalar type the compute kernels are generic over.
pub trait Real: Float + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Flat row-major array with explicit extents. Feature maps use
/// `[channels, height, width]`, conv kernels `[out, in, kh, kw]`,
/// scalars `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor { dims, data: vec![T::zero(); n] }
    }

    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor dims {:?} do not cover {} values",
            dims,
            data.len()
        );
        Tensor { dims, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a `[1]` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as `[c, h, w]`; panics if the rank differs.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.dims.len(), 3, "expected [c,h,w] tensor, got {:?}", self.dims);
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}
