//! Dense displacement fields and the resampling/regularization operations
//! built on the differentiable kernels: pull-back bilinear warping, bending
//! energy, linear resizing, and binary mask warping.
//!
//! Displacements live in pixel units of the output (fixed) grid; conversion
//! to mm happens only in metrics via the spacing.

use crate::diffcore::kernels;
use crate::diffcore::{Real, Tensor};
use crate::grid::{Image, RoiMask};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("displacement field contains non-finite values")]
    NonFiniteDdf,
    #[error("grid too small for bending energy: {0}x{1} (need >= 3 per dim)")]
    GridTooSmall(usize, usize),
}

/// Per-grid-point displacement with x and y components in pixels, stored
/// channel-major as `[2, h, w]` (channel 0 = x, channel 1 = y).
#[derive(Clone, Debug, PartialEq)]
pub struct Ddf {
    pub h: usize,
    pub w: usize,
    pub spacing_mm: f64,
    pub data: Vec<f32>,
}

impl Ddf {
    pub fn zeros(h: usize, w: usize, spacing_mm: f64) -> Self {
        Ddf { h, w, spacing_mm, data: vec![0.0; 2 * h * w] }
    }

    #[inline]
    pub fn ux(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn uy(&self, y: usize, x: usize) -> f32 {
        self.data[self.h * self.w + y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, ux: f32, uy: f32) {
        self.data[y * self.w + x] = ux;
        self.data[self.h * self.w + y * self.w + x] = uy;
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![2, self.h, self.w],
            self.data.iter().map(|v| T::of_f64(*v as f64)).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor<f32>, spacing_mm: f64) -> Self {
        let (c, h, w) = t.chw();
        assert_eq!(c, 2, "ddf tensor must be [2,h,w]");
        Ddf { h, w, spacing_mm, data: t.data().to_vec() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest per-point Euclidean displacement norm, in pixels.
    pub fn max_norm(&self) -> f64 {
        let plane = self.h * self.w;
        (0..plane)
            .map(|i| {
                let ux = self.data[i] as f64;
                let uy = self.data[plane + i] as f64;
                (ux * ux + uy * uy).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-voxel foreground probability on the fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let (c, h, w) = t.chw();
        assert_eq!(c, 1, "probability map must be single channel");
        ProbMap { h, w, data: t.data().to_vec() }
    }

    pub fn threshold(&self, level: f32) -> RoiMask {
        RoiMask { h: self.h, w: self.w, data: self.data.iter().map(|v| *v > level).collect() }
    }
}

/// out(x) = bilinear(source, x + u(x)); coordinates outside the source
/// contribute zero, so regions leaving the field of view vanish rather than
/// smear.
pub fn resample_bilinear<T: Real>(source: &Tensor<T>, ddf: &Tensor<T>) -> Result<Tensor<T>, WarpError> {
    if !ddf.all_finite() {
        return Err(WarpError::NonFiniteDdf);
    }
    Ok(kernels::resample_forward(source, ddf))
}

/// Warp an intensity image with a pull-back field defined on the fixed grid.
pub fn resample_image(source: &Image, ddf: &Ddf) -> Result<Image, WarpError> {
    let src = source.to_tensor::<f32>();
    let field = ddf.to_tensor::<f32>();
    let out = resample_bilinear(&src, &field)?;
    Ok(Image { h: ddf.h, w: ddf.w, spacing_mm: source.spacing_mm, data: out.into_data() })
}

/// Mean over interior grid points of the squared second spatial derivatives
/// of each displacement component (the mixed term counted twice).
pub fn bending_energy<T: Real>(ddf: &Tensor<T>) -> Result<T, WarpError> {
    let (_, h, w) = ddf.chw();
    if h < 3 || w < 3 {
        return Err(WarpError::GridTooSmall(h, w));
    }
    if !ddf.all_finite() {
        return Err(WarpError::NonFiniteDdf);
    }
    Ok(kernels::bending_energy_forward(ddf).item())
}

pub fn bending_energy_ddf(ddf: &Ddf) -> Result<f64, WarpError> {
    bending_energy(&ddf.to_tensor::<f64>())
}

/// Separable linear interpolation with corner-aligned coordinate mapping.
pub fn resize_linear<T: Real>(x: &Tensor<T>, target_h: usize, target_w: usize) -> Tensor<T> {
    kernels::resize_linear(x, target_h, target_w)
}

/// Resize a binary mask as a float field to the target grid (not
/// re-thresholded; callers decide).
pub fn resize_mask_soft(mask: &RoiMask, target_h: usize, target_w: usize) -> Tensor<f32> {
    resize_linear(&mask.to_tensor::<f32>(), target_h, target_w)
}

/// Warp a binary mask: bilinear pull-back of the 0/1 field, then threshold
/// at 0.5. An empty result is legal; callers check [`RoiMask::is_empty`].
pub fn warp_mask_binary(mask: &RoiMask, ddf: &Ddf) -> Result<RoiMask, WarpError> {
    let src = mask.to_tensor::<f32>();
    let field = ddf.to_tensor::<f32>();
    let warped = resample_bilinear(&src, &field)?;
    Ok(RoiMask {
        h: ddf.h,
        w: ddf.w,
        data: warped.data().iter().map(|v| *v > 0.5).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> RoiMask {
        let mut m = RoiMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn zero_field_keeps_mask() {
        let m = disc_mask(16, 16, 8.0, 8.0, 3.0);
        let ddf = Ddf::zeros(16, 16, 1.0);
        assert_eq!(warp_mask_binary(&m, &ddf).unwrap(), m);
    }

    #[test]
    fn integer_shift_moves_mask_exactly() {
        let m = disc_mask(16, 16, 8.0, 8.0, 2.5);
        let mut ddf = Ddf::zeros(16, 16, 1.0);
        for y in 0..16 {
            for x in 0..16 {
                ddf.set(y, x, 2.0, -1.0);
            }
        }
        // Pull-back: out(x) = src(x + u), so the mask content moves by -u.
        let warped = warp_mask_binary(&m, &ddf).unwrap();
        let expect = disc_mask(16, 16, 9.0, 6.0, 2.5);
        assert_eq!(warped, expect);
    }

    #[test]
    fn mask_displaced_out_of_grid_becomes_empty() {
        let m = disc_mask(12, 12, 6.0, 6.0, 2.0);
        let mut ddf = Ddf::zeros(12, 12, 1.0);
        for y in 0..12 {
            for x in 0..12 {
                ddf.set(y, x, 40.0, 40.0);
            }
        }
        assert!(warp_mask_binary(&m, &ddf).unwrap().is_empty());
    }

    #[test]
    fn non_finite_field_is_rejected() {
        let m = disc_mask(8, 8, 4.0, 4.0, 2.0);
        let mut ddf = Ddf::zeros(8, 8, 1.0);
        ddf.set(0, 0, f32::NAN, 0.0);
        assert!(warp_mask_binary(&m, &ddf).is_err());
    }

    #[test]
    fn bending_energy_constant_field_is_zero() {
        let mut ddf = Ddf::zeros(8, 8, 1.0);
        for y in 0..8 {
            for x in 0..8 {
                ddf.set(y, x, 1.5, -2.0);
            }
        }
        assert_eq!(bending_energy_ddf(&ddf).unwrap(), 0.0);
    }

    #[test]
    fn bending_energy_affine_invariance_64bit() {
        // BE(u + affine) == BE(u) to 1e-9 relative in f64.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (10, 9);
        let mut base = Tensor::<f64>::zeros(vec![2, h, w]);
        for v in base.data_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        let be0 = bending_energy(&base).unwrap();
        let mut shifted = base.clone();
        for comp in 0..2 {
            let (a, b, c) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-5.0..5.0),
            );
            for y in 0..h {
                for x in 0..w {
                    let i = comp * h * w + y * w + x;
                    shifted.data_mut()[i] += a * x as f64 + b * y as f64 + c;
                }
            }
        }
        let be1 = bending_energy(&shifted).unwrap();
        assert!((be0 - be1).abs() <= 1e-9 * be0.abs().max(1.0), "be0={be0} be1={be1}");
    }

    #[test]
    fn resample_output_stays_in_hull() {
        // Each output point is a convex combination of source values and 0.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let src_t = {
            let mut t = Tensor::<f64>::zeros(vec![1, 9, 9]);
            for v in t.data_mut() {
                *v = rng.random_range(-2.0..5.0);
            }
            t
        };
        let mut ddf = Tensor::<f64>::zeros(vec![2, 9, 9]);
        for v in ddf.data_mut() {
            *v = rng.random_range(-4.0..4.0);
        }
        let out = resample_bilinear(&src_t, &ddf).unwrap();
        let lo = src_t.data().iter().cloned().fold(0.0f64, f64::min);
        let hi = src_t.data().iter().cloned().fold(0.0f64, f64::max);
        for v in out.data() {
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}
