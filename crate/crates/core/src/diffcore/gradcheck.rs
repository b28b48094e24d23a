//! Central finite-difference verification of reverse-mode gradients.
//! Runs on the 64-bit build of the kernels; 32-bit differences are too noisy
//! to gate on.

use super::tensor::Tensor;
use super::{DiffError, Graph, Params};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

const DENOM_FLOOR: f64 = 1e-8;
const MIN_COORDS: usize = 128;

/// Compare `backward()` against central differences on a sampled coordinate
/// subset (at least 128 coordinates, or every coordinate if fewer).
pub fn grad_check(
    graph: &Graph,
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    sample_seed: u64,
) -> Result<GradCheckReport, DiffError> {
    let (_, grad) = graph.backward(params, inputs)?;
    fd_compare(graph, params, inputs, &grad, h, tol, sample_seed)
}

/// Check an externally supplied candidate gradient against central finite
/// differences. `grad_check` is this with the graph's own backward pass; the
/// split lets tests verify that a corrupted gradient is actually caught.
pub fn fd_compare(
    graph: &Graph,
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    candidate: &[f64],
    h: f64,
    tol: f64,
    sample_seed: u64,
) -> Result<GradCheckReport, DiffError> {
    assert!(h > 0.0, "step must be positive");
    let n = params.len();
    assert_eq!(candidate.len(), n, "candidate gradient length mismatch");

    let coords: Vec<usize> = if n <= MIN_COORDS {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        all.shuffle(&mut rng);
        all.truncate(MIN_COORDS);
        all
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: coords.len(),
        tol,
        pass: true,
    };
    let mut perturbed = params.clone();
    for &j in &coords {
        let orig = perturbed.values[j];
        perturbed.values[j] = orig + h;
        let f_plus = graph.forward_scalar(&perturbed, inputs)?;
        perturbed.values[j] = orig - h;
        let f_minus = graph.forward_scalar(&perturbed, inputs)?;
        perturbed.values[j] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let analytic = candidate[j];
        let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = j;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Smallest distance from a piecewise-smoothness boundary at this
/// evaluation point: ReLU inputs to zero, and bilinear sample coordinates to
/// the integer lattice wherever the local source cell is not flat (a flat
/// cell has no slope discontinuity, so lattice proximity is harmless there).
///
/// Central differences are only meaningful where the function is smooth
/// across the probed interval, so randomized grad-check instances should be
/// drawn conditioned on this margin exceeding a few multiples of `h`. The
/// log clamp needs no term here: its inputs are sigmoid outputs or warped
/// mask values, whose sensitivity collapses near the clamp bounds faster
/// than the bounds can be crossed at small `h`.
pub fn fd_validity_margin(
    graph: &Graph,
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
) -> Result<f64, DiffError> {
    use crate::diffcore::OpKind;
    let values = graph.forward_nodes(params, inputs)?;
    let mut margin = f64::INFINITY;
    for node in graph.nodes() {
        match &node.op {
            OpKind::Relu => {
                for v in values[node.inputs[0]].data() {
                    margin = margin.min(v.abs());
                }
            }
            OpKind::Resample => {
                let src = &values[node.inputs[0]];
                let ddf = &values[node.inputs[1]];
                let (c, hs, ws) = src.chw();
                let (_, h, w) = ddf.chw();
                let plane = h * w;
                let at = |ch: usize, y: isize, x: isize| -> f64 {
                    if y >= 0 && y < hs as isize && x >= 0 && x < ws as isize {
                        src.data()[ch * hs * ws + y as usize * ws + x as usize]
                    } else {
                        0.0
                    }
                };
                // A 4x4 neighbourhood that is constant in every channel has
                // no interpolation kink within one cell of the sample.
                let flat_around = |sy: f64, sx: f64| -> bool {
                    let y0 = sy.floor() as isize;
                    let x0 = sx.floor() as isize;
                    for ch in 0..c {
                        let v0 = at(ch, y0 - 1, x0 - 1);
                        for dy in -1..=2isize {
                            for dx in -1..=2isize {
                                if at(ch, y0 + dy, x0 + dx) != v0 {
                                    return false;
                                }
                            }
                        }
                    }
                    true
                };
                for y in 0..h {
                    for x in 0..w {
                        let sx = x as f64 + ddf.data()[y * w + x];
                        let sy = y as f64 + ddf.data()[plane + y * w + x];
                        let d = (sx - sx.round()).abs().min((sy - sy.round()).abs());
                        if d < margin && !flat_around(sy, sx) {
                            margin = d;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(margin)
}
