//! Forward and adjoint compute kernels shared by the graph executor and the
//! warping utilities. Everything here is a pure function over slices; the
//! adjoint of each op mirrors its forward loop nest so the pair stays in sync.

use super::tensor::{Real, Tensor};

/// Symmetric zero padding that keeps stride-1 outputs the same size and
/// halves even extents at stride 2.
#[inline]
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// out[co,oy,ox] = sum_{ci,ky,kx} w[co,ci,ky,kx] * x[ci, oy*s+ky-p, ox*s+kx-p]
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (cin, h, win) = x.chw();
    let wd = w.dims();
    assert_eq!(wd.len(), 4, "conv weight must be [co,ci,kh,kw]");
    let (co, ci, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    assert_eq!(ci, cin, "conv weight in-channels mismatch");
    assert_eq!(kh, kw, "square kernels only");
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(win, kw, stride);
    let pad = (kh - 1) / 2;

    let mut out = Tensor::zeros(vec![co, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    let os = out.data_mut();

    for c_out in 0..co {
        let o_base = c_out * ho * wo;
        for c_in in 0..cin {
            let x_base = c_in * h * win;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = ws[((c_out * cin + c_in) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let dy = ky as isize - pad as isize;
                    let dx = kx as isize - pad as isize;
                    if stride == 1 {
                        // Contiguous row windows; bounds hoisted out of the
                        // inner loop so it vectorizes.
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((win as isize - dx).min(wo as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = x_base + iy as usize * win;
                            let out_row = o_base + oy * wo;
                            let src = &xs[in_row + (ox_lo as isize + dx) as usize
                                ..in_row + (ox_hi as isize + dx) as usize];
                            let dst = &mut os[out_row + ox_lo..out_row + ox_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * *s;
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            let iy = (oy * stride) as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = x_base + iy as usize * win;
                            let out_row = o_base + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * stride) as isize + dx;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                os[out_row + ox] = os[out_row + ox] + wv * xs[in_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d_forward`] w.r.t. both the input and the weights.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    grad_x: &mut Tensor<T>,
    grad_w: &mut Tensor<T>,
) {
    let (cin, h, win) = x.chw();
    let wd = w.dims();
    let (co, _, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let (go_c, ho, wo) = grad_out.chw();
    assert_eq!(go_c, co);
    let pad = (kh - 1) / 2;

    let xs = x.data();
    let ws = w.data();
    let gos = grad_out.data();
    let gxs = grad_x.data_mut();
    let gw_len = grad_w.numel();
    let gws = grad_w.data_mut();
    assert_eq!(gw_len, w.numel());

    for c_out in 0..co {
        let o_base = c_out * ho * wo;
        for c_in in 0..cin {
            let x_base = c_in * h * win;
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((c_out * cin + c_in) * kh + ky) * kw + kx;
                    let wv = ws[widx];
                    let dy = ky as isize - pad as isize;
                    let dx = kx as isize - pad as isize;
                    let mut wacc = T::zero();
                    if stride == 1 {
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((win as isize - dx).min(wo as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = x_base + iy as usize * win;
                            let out_row = o_base + oy * wo;
                            let in_lo = in_row + (ox_lo as isize + dx) as usize;
                            let in_hi = in_row + (ox_hi as isize + dx) as usize;
                            let go_row = &gos[out_row + ox_lo..out_row + ox_hi];
                            let gx_row = &mut gxs[in_lo..in_hi];
                            for (g, d) in gx_row.iter_mut().zip(go_row) {
                                *g = *g + wv * *d;
                            }
                            let x_row = &xs[in_lo..in_hi];
                            for (xv, d) in x_row.iter().zip(go_row) {
                                wacc = wacc + *xv * *d;
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            let iy = (oy * stride) as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = x_base + iy as usize * win;
                            let out_row = o_base + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * stride) as isize + dx;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                let g = gos[out_row + ox];
                                gxs[in_row + ix as usize] = gxs[in_row + ix as usize] + wv * g;
                                wacc = wacc + xs[in_row + ix as usize] * g;
                            }
                        }
                    }
                    gws[widx] = gws[widx] + wacc;
                }
            }
        }
    }
}

pub fn bias_add_forward<T: Real>(x: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert_eq!(b.dims(), &[c], "bias must be [channels]");
    let mut out = x.clone();
    let plane = h * w;
    let bs = b.data();
    for (ch, bv) in bs.iter().enumerate().take(c) {
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = *v + *bv;
        }
    }
    out
}

pub fn bias_add_backward<T: Real>(
    c: usize,
    plane: usize,
    grad_out: &Tensor<T>,
    grad_x: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) {
    let gos = grad_out.data();
    for (g, d) in grad_x.data_mut().iter_mut().zip(gos) {
        *g = *g + *d;
    }
    let gbs = grad_b.data_mut();
    for ch in 0..c {
        let mut acc = T::zero();
        for v in &gos[ch * plane..(ch + 1) * plane] {
            acc = acc + *v;
        }
        gbs[ch] = gbs[ch] + acc;
    }
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, grad_x: &mut Tensor<T>) {
    for ((g, xv), d) in grad_x.data_mut().iter_mut().zip(x.data()).zip(grad_out.data()) {
        if *xv > T::zero() {
            *g = *g + *d;
        }
    }
}

pub fn sigmoid_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // Keep the open interval (0,1) even where exp saturates.
    s.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>, grad_x: &mut Tensor<T>) {
    for ((g, yv), d) in grad_x.data_mut().iter_mut().zip(y.data()).zip(grad_out.data()) {
        *g = *g + *d * *yv * (T::one() - *yv);
    }
}

pub fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let mut out = Tensor::zeros(vec![c, 2 * h, 2 * w]);
    let xs = x.data();
    let os = out.data_mut();
    for ch in 0..c {
        for y in 0..2 * h {
            let in_row = (ch * h + y / 2) * w;
            let out_row = (ch * 2 * h + y) * 2 * w;
            for x_out in 0..2 * w {
                os[out_row + x_out] = xs[in_row + x_out / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(grad_out: &Tensor<T>, grad_x: &mut Tensor<T>) {
    let (c, h2, w2) = grad_out.chw();
    let (h, w) = (h2 / 2, w2 / 2);
    let gos = grad_out.data();
    let gxs = grad_x.data_mut();
    for ch in 0..c {
        for y in 0..h2 {
            let gx_row = (ch * h + y / 2) * w;
            let go_row = (ch * h2 + y) * w2;
            for x_out in 0..w2 {
                gxs[gx_row + x_out / 2] = gxs[gx_row + x_out / 2] + gos[go_row + x_out];
            }
        }
    }
}

pub fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ca, h, w) = a.chw();
    let (cb, hb, wb) = b.chw();
    assert_eq!((h, w), (hb, wb), "concat spatial dims mismatch");
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(vec![ca + cb, h, w], data)
}

/// Mean over every element; output is a `[1]` scalar.
pub fn mean_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::of_f64(x.numel() as f64);
    let mut acc = T::zero();
    for v in x.data() {
        acc = acc + *v;
    }
    Tensor::scalar(acc / n)
}

pub fn mean_backward<T: Real>(numel: usize, grad_out: &Tensor<T>, grad_x: &mut Tensor<T>) {
    let g = grad_out.item() / T::of_f64(numel as f64);
    for v in grad_x.data_mut() {
        *v = *v + g;
    }
}

/// ln(clamp(x, eps, 1-eps)); the clamp keeps cross-entropy terms bounded.
pub fn log_clamped_forward<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let lo = T::of_f64(eps);
    let hi = T::of_f64(1.0 - eps);
    let mut out = x.clone();
    for v in out.data_mut() {
        let c = if *v < lo {
            lo
        } else if *v > hi {
            hi
        } else {
            *v
        };
        *v = c.ln();
    }
    out
}

pub fn log_clamped_backward<T: Real>(
    x: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
    grad_x: &mut Tensor<T>,
) {
    let lo = T::of_f64(eps);
    let hi = T::of_f64(1.0 - eps);
    for ((g, xv), d) in grad_x.data_mut().iter_mut().zip(x.data()).zip(grad_out.data()) {
        if *xv >= lo && *xv <= hi {
            *g = *g + *d / *xv;
        }
    }
}

/// Pull-back bilinear resampling: out(x) = src(x + u(x)) with zero outside
/// the source. `ddf` is `[2,h,w]`, channel 0 the x-displacement and channel 1
/// the y-displacement, both in pixels of the output grid.
pub fn resample_forward<T: Real>(src: &Tensor<T>, ddf: &Tensor<T>) -> Tensor<T> {
    let (c, hs, ws) = src.chw();
    let (d, h, w) = ddf.chw();
    assert_eq!(d, 2, "2-d displacement field expected");
    let mut out = Tensor::zeros(vec![c, h, w]);
    let ss = src.data();
    let us = ddf.data();
    let os = out.data_mut();
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::of_f64(x as f64) + us[i];
            let sy = T::of_f64(y as f64) + us[plane + i];
            let (x0, y0, fx, fy) = corner_weights(sx, sy);
            for ch in 0..c {
                let base = ch * hs * ws;
                let mut acc = T::zero();
                for (cy, cx, wgt) in taps(x0, y0, fx, fy) {
                    if cx >= 0 && cx < ws as isize && cy >= 0 && cy < hs as isize {
                        acc = acc + wgt * ss[base + cy as usize * ws + cx as usize];
                    }
                }
                os[ch * plane + i] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`resample_forward`] w.r.t. both the source values and the
/// displacement field.
pub fn resample_backward<T: Real>(
    src: &Tensor<T>,
    ddf: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_src: &mut Tensor<T>,
    grad_ddf: &mut Tensor<T>,
) {
    let (c, hs, ws) = src.chw();
    let (_, h, w) = ddf.chw();
    let ss = src.data();
    let us = ddf.data();
    let gos = grad_out.data();
    let plane = h * w;
    let gss = grad_src.data_mut();
    let gus = grad_ddf.data_mut();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::of_f64(x as f64) + us[i];
            let sy = T::of_f64(y as f64) + us[plane + i];
            let (x0, y0, fx, fy) = corner_weights(sx, sy);
            let mut d_sx = T::zero();
            let mut d_sy = T::zero();
            for ch in 0..c {
                let base = ch * hs * ws;
                let g = gos[ch * plane + i];
                if g == T::zero() {
                    continue;
                }
                let at = |cy: isize, cx: isize| -> T {
                    if cx >= 0 && cx < ws as isize && cy >= 0 && cy < hs as isize {
                        ss[base + cy as usize * ws + cx as usize]
                    } else {
                        T::zero()
                    }
                };
                let v00 = at(y0, x0);
                let v01 = at(y0, x0 + 1);
                let v10 = at(y0 + 1, x0);
                let v11 = at(y0 + 1, x0 + 1);
                d_sx = d_sx + g * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                d_sy = d_sy + g * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                for (cy, cx, wgt) in taps(x0, y0, fx, fy) {
                    if cx >= 0 && cx < ws as isize && cy >= 0 && cy < hs as isize {
                        let idx = base + cy as usize * ws + cx as usize;
                        gss[idx] = gss[idx] + wgt * g;
                    }
                }
            }
            gus[i] = gus[i] + d_sx;
            gus[plane + i] = gus[plane + i] + d_sy;
        }
    }
}

#[inline]
fn corner_weights<T: Real>(sx: T, sy: T) -> (isize, isize, T, T) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    (x0.as_f64() as isize, y0.as_f64() as isize, sx - x0, sy - y0)
}

#[inline]
fn taps<T: Real>(x0: isize, y0: isize, fx: T, fy: T) -> [(isize, isize, T); 4] {
    let gx = T::one() - fx;
    let gy = T::one() - fy;
    [
        (y0, x0, gx * gy),
        (y0, x0 + 1, fx * gy),
        (y0 + 1, x0, gx * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ]
}

/// Mean over interior grid points of
/// sum_d [(d2u/dx2)^2 + (d2u/dy2)^2 + 2 (d2u/dxdy)^2],
/// second derivatives by central differences in pixel units.
pub fn bending_energy_forward<T: Real>(ddf: &Tensor<T>) -> Tensor<T> {
    let (d, h, w) = ddf.chw();
    assert!(h >= 3 && w >= 3, "bending energy needs a grid of at least 3x3");
    let us = ddf.data();
    let quarter = T::of_f64(0.25);
    let two = T::of_f64(2.0);
    let mut acc = T::zero();
    for comp in 0..d {
        let base = comp * h * w;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let at = |yy: usize, xx: usize| us[base + yy * w + xx];
                let dxx = at(y, x + 1) - two * at(y, x) + at(y, x - 1);
                let dyy = at(y + 1, x) - two * at(y, x) + at(y - 1, x);
                let dxy = (at(y + 1, x + 1) - at(y + 1, x - 1) - at(y - 1, x + 1)
                    + at(y - 1, x - 1))
                    * quarter;
                acc = acc + dxx * dxx + dyy * dyy + two * dxy * dxy;
            }
        }
    }
    let n_interior = T::of_f64(((h - 2) * (w - 2)) as f64);
    Tensor::scalar(acc / n_interior)
}

pub fn bending_energy_backward<T: Real>(
    ddf: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_ddf: &mut Tensor<T>,
) {
    let (d, h, w) = ddf.chw();
    let us = ddf.data();
    let gus = grad_ddf.data_mut();
    let n_interior = T::of_f64(((h - 2) * (w - 2)) as f64);
    let scale = grad_out.item() / n_interior;
    let quarter = T::of_f64(0.25);
    let two = T::of_f64(2.0);
    for comp in 0..d {
        let base = comp * h * w;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let at = |yy: usize, xx: usize| us[base + yy * w + xx];
                let dxx = at(y, x + 1) - two * at(y, x) + at(y, x - 1);
                let dyy = at(y + 1, x) - two * at(y, x) + at(y - 1, x);
                let dxy = (at(y + 1, x + 1) - at(y + 1, x - 1) - at(y - 1, x + 1)
                    + at(y - 1, x - 1))
                    * quarter;
                let gxx = scale * two * dxx;
                let gyy = scale * two * dyy;
                // d/d(dxy) of 2*dxy^2, then through the 1/4 stencil factor.
                let gxy = scale * two * two * dxy * quarter;
                let mut add = |yy: usize, xx: usize, v: T| {
                    gus[base + yy * w + xx] = gus[base + yy * w + xx] + v;
                };
                add(y, x + 1, gxx);
                add(y, x - 1, gxx);
                add(y, x, -two * gxx);
                add(y + 1, x, gyy);
                add(y - 1, x, gyy);
                add(y, x, -two * gyy);
                add(y + 1, x + 1, gxy);
                add(y + 1, x - 1, -gxy);
                add(y - 1, x + 1, -gxy);
                add(y - 1, x - 1, gxy);
            }
        }
    }
}

/// Separable linear interpolation with corner-aligned coordinates.
/// Not part of the differentiable op set; used for input preparation.
pub fn resize_linear<T: Real>(x: &Tensor<T>, th: usize, tw: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert!(th > 0 && tw > 0, "target dims must be positive");
    if th == h && tw == w {
        return x.clone();
    }
    // Rows first, then columns.
    let mut rows = Tensor::<T>::zeros(vec![c, h, tw]);
    {
        let xs = x.data();
        let rs = rows.data_mut();
        for ch in 0..c {
            for y in 0..h {
                let in_row = (ch * h + y) * w;
                let out_row = (ch * h + y) * tw;
                for tx in 0..tw {
                    let (i0, i1, f) = corner_aligned(tx, tw, w);
                    let v = T::of_f64(1.0 - f) * xs[in_row + i0] + T::of_f64(f) * xs[in_row + i1];
                    rs[out_row + tx] = v;
                }
            }
        }
    }
    let mut out = Tensor::<T>::zeros(vec![c, th, tw]);
    {
        let rs = rows.data();
        let os = out.data_mut();
        for ch in 0..c {
            for ty in 0..th {
                let (i0, i1, f) = corner_aligned(ty, th, h);
                let r0 = (ch * h + i0) * tw;
                let r1 = (ch * h + i1) * tw;
                let out_row = (ch * th + ty) * tw;
                for tx in 0..tw {
                    os[out_row + tx] =
                        T::of_f64(1.0 - f) * rs[r0 + tx] + T::of_f64(f) * rs[r1 + tx];
                }
            }
        }
    }
    out
}

#[inline]
fn corner_aligned(t: usize, t_len: usize, s_len: usize) -> (usize, usize, f64) {
    if t_len == 1 || s_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = t as f64 * (s_len - 1) as f64 / (t_len - 1) as f64;
    let i0 = pos.floor() as usize;
    let i0 = i0.min(s_len - 1);
    let i1 = (i0 + 1).min(s_len - 1);
    (i0, i1, pos - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![c, h, w], v)
    }

    #[test]
    fn identity_kernel_preserves_values() {
        let x = t3(1, 4, 5, (0..20).map(|v| v as f64 * 0.37 - 2.0).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(vec![1, 1, 3, 3], k);
        let y = conv2d_forward(&x, &w, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        // 3x3 all-ones kernel on 5x5 all-ones input: interior outputs are 9.
        let x = t3(1, 5, 5, vec![1.0; 25]);
        let w = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d_forward(&x, &w, 1);
        for y_i in 1..4 {
            for x_i in 1..4 {
                assert_eq!(y.data()[y_i * 5 + x_i], 9.0);
            }
        }
        assert_eq!(y.data()[0], 4.0); // corner sees a 2x2 window
    }

    #[test]
    fn stride2_halves_even_extents() {
        let x = t3(1, 8, 8, vec![1.0; 64]);
        let w = Tensor::from_vec(vec![2, 1, 3, 3], vec![0.5; 18]);
        let y = conv2d_forward(&x, &w, 2);
        assert_eq!(y.dims(), &[2, 4, 4]);
    }

    #[test]
    fn resample_zero_ddf_is_identity() {
        let src = t3(1, 3, 4, (0..12).map(|v| v as f64).collect());
        let ddf = Tensor::zeros(vec![2, 3, 4]);
        let out = resample_forward(&src, &ddf);
        assert_eq!(out.data(), src.data());
    }

    #[test]
    fn resample_pullback_shift() {
        // Foreground at (x=1, y=1); u = (+1, 0) moves it to (x=0, y=1).
        let mut src = Tensor::<f64>::zeros(vec![1, 3, 3]);
        src.data_mut()[1 * 3 + 1] = 1.0;
        let mut ddf = Tensor::<f64>::zeros(vec![2, 3, 3]);
        for v in &mut ddf.data_mut()[0..9] {
            *v = 1.0;
        }
        let out = resample_forward(&src, &ddf);
        assert_eq!(out.data()[1 * 3 + 0], 1.0);
        assert_eq!(out.data()[1 * 3 + 1], 0.0);
    }

    #[test]
    fn resample_outside_yields_zero() {
        let src = t3(1, 3, 3, vec![5.0; 9]);
        let mut ddf = Tensor::<f64>::zeros(vec![2, 3, 3]);
        for v in &mut ddf.data_mut()[0..9] {
            *v = 100.0;
        }
        let out = resample_forward(&src, &ddf);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bending_energy_of_quadratic_is_four() {
        // u_x(x, y) = x^2 on a 5x5 grid: d2/dx2 = 2 exactly, everything else 0.
        let mut ddf = Tensor::<f64>::zeros(vec![2, 5, 5]);
        for y in 0..5 {
            for x in 0..5 {
                ddf.data_mut()[y * 5 + x] = (x * x) as f64;
            }
        }
        let be = bending_energy_forward(&ddf).item();
        assert!((be - 4.0).abs() < 1e-12, "be = {be}");
    }

    #[test]
    fn bending_energy_affine_vanishes() {
        let mut ddf = Tensor::<f64>::zeros(vec![2, 6, 7]);
        for y in 0..6 {
            for x in 0..7 {
                ddf.data_mut()[y * 7 + x] = 0.3 * x as f64 - 1.7 * y as f64 + 0.25;
                ddf.data_mut()[42 + y * 7 + x] = -2.1 * x as f64 + 0.9 * y as f64;
            }
        }
        assert!(bending_energy_forward(&ddf).item().abs() <= 1e-10);
    }

    #[test]
    fn resize_ramp_matches_linear_arithmetic() {
        let x = t3(1, 1, 4, vec![0.0, 1.0, 2.0, 3.0]);
        let y = resize_linear(&x, 1, 7);
        let expect = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
        for (a, b) in y.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_same_dims_is_copy() {
        let x = t3(2, 3, 3, (0..18).map(|v| v as f64).collect());
        assert_eq!(resize_linear(&x, 3, 3).data(), x.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = t3(1, 4, 4, vec![0.7; 16]);
        let y = resize_linear(&x, 9, 5);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_nearest_and_adjoint_agree() {
        let x = t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x_forward(&x);
        assert_eq!(y.dims(), &[1, 4, 4]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[3], 2.0);
        // Adjoint of a broadcast is a sum: each input cell collects 4 cells.
        let go = Tensor::from_vec(vec![1, 4, 4], vec![1.0; 16]);
        let mut gx = Tensor::zeros(vec![1, 2, 2]);
        upsample2x_backward(&go, &mut gx);
        assert!(gx.data().iter().all(|v| *v == 4.0));
    }

    #[test]
    fn sigmoid_bounds_and_symmetry() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        for v in [-50.0, -3.0, 0.2, 80.0] {
            let s = sigmoid_scalar(v);
            assert!(s > 0.0 && s < 1.0);
        }
    }
}
