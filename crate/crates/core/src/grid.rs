//! Scalar fields and binary masks on a regular 2-d grid with physical
//! spacing. Row-major, y-major storage throughout.

use crate::diffcore::{Real, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dims mismatch: ({0}, {1}) vs ({2}, {3})")]
    DimsMismatch(usize, usize, usize, usize),
}

/// Intensity image with isotropic spacing in mm per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub spacing_mm: f64,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, spacing_mm: f64) -> Self {
        Image { h, w, spacing_mm, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f32 {
        &mut self.data[y * self.w + x]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(vec![1, self.h, self.w], self.data.iter().map(|v| T::of_f64(*v as f64)).collect())
    }
}

/// Binary region mask; stored as booleans in memory, 0.0/1.0 on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl RoiMask {
    pub fn empty(h: usize, w: usize) -> Self {
        RoiMask { h, w, data: vec![false; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|v| *v)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![1, self.h, self.w],
            self.data.iter().map(|v| if *v { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect()
    }

    pub fn from_f32(h: usize, w: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), h * w);
        RoiMask { h, w, data: values.iter().map(|v| *v > 0.5).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip_through_f32() {
        let mut m = RoiMask::empty(3, 3);
        m.set(1, 2, true);
        m.set(0, 0, true);
        let v = m.to_f32_vec();
        let back = RoiMask::from_f32(3, 3, &v);
        assert_eq!(m, back);
        assert_eq!(back.count(), 2);
    }
}
