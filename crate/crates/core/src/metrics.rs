//! Registration accuracy measures: centroids, target registration error,
//! Dice overlap, the no-registration baseline, and the paired Wilcoxon
//! signed-rank test (exact by enumeration for small n, tie- and
//! continuity-corrected normal approximation beyond).

use crate::grid::RoiMask;
use crate::synth::ImagePair;
use crate::warp::{self, ProbMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("map is identically zero; no centroid")]
    AllZero,
    #[error("empty distance list")]
    EmptyList,
    #[error("both masks empty; Dice undefined")]
    BothEmpty,
    #[error("mask dims mismatch: {0}x{1} vs {2}x{3}")]
    DimsMismatch(usize, usize, usize, usize),
    #[error("paired samples differ in length: {0} vs {1}")]
    UnpairedLengths(usize, usize),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("too few non-zero pairs: {0} (need >= {1})")]
    TooFewPairs(usize, usize),
    #[error("missing prediction for pair {pair} roi {roi}")]
    MissingPrediction { pair: String, roi: usize },
}

/// Centroid in mm with the voxel count that produced it; `fallback` marks
/// degenerate maps scored through their global maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidResult {
    pub x_mm: f64,
    pub y_mm: f64,
    pub voxels: usize,
    pub fallback: bool,
}

impl CentroidResult {
    pub fn distance_mm(&self, other: &CentroidResult) -> f64 {
        ((self.x_mm - other.x_mm).powi(2) + (self.y_mm - other.y_mm).powi(2)).sqrt()
    }
}

/// Unweighted mean pixel coordinate of `{p > threshold}` scaled by the
/// spacing; if nothing clears the threshold, the global maximum location is
/// returned with the fallback flag set.
pub fn centroid_of(
    values: &[f32],
    h: usize,
    w: usize,
    threshold: f64,
    spacing_mm: f64,
) -> Result<CentroidResult, MetricsError> {
    assert_eq!(values.len(), h * w);
    let mut n = 0usize;
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if values[y * w + x] as f64 > threshold {
                n += 1;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    if n > 0 {
        return Ok(CentroidResult {
            x_mm: sx / n as f64 * spacing_mm,
            y_mm: sy / n as f64 * spacing_mm,
            voxels: n,
            fallback: false,
        });
    }
    if values.iter().all(|v| *v == 0.0) {
        return Err(MetricsError::AllZero);
    }
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(CentroidResult {
        x_mm: (best % w) as f64 * spacing_mm,
        y_mm: (best / w) as f64 * spacing_mm,
        voxels: 0,
        fallback: true,
    })
}

pub fn centroid_prob(
    map: &ProbMap,
    threshold: f64,
    spacing_mm: f64,
) -> Result<CentroidResult, MetricsError> {
    centroid_of(&map.data, map.h, map.w, threshold, spacing_mm)
}

pub fn centroid_mask(mask: &RoiMask, spacing_mm: f64) -> Result<CentroidResult, MetricsError> {
    let values = mask.to_f32_vec();
    centroid_of(&values, mask.h, mask.w, 0.5, spacing_mm)
}

/// Root-mean-square of per-ROI centroid distances, mm.
pub fn tre(errors_mm: &[f64]) -> Result<f64, MetricsError> {
    if errors_mm.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let ms = errors_mm.iter().map(|e| e * e).sum::<f64>() / errors_mm.len() as f64;
    Ok(ms.sqrt())
}

/// Dice similarity coefficient 2|A∩B| / (|A| + |B|).
pub fn dsc(a: &RoiMask, b: &RoiMask) -> Result<f64, MetricsError> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(MetricsError::DimsMismatch(a.h, a.w, b.h, b.w));
    }
    let na = a.count();
    let nb = b.count();
    if na == 0 && nb == 0 {
        return Err(MetricsError::BothEmpty);
    }
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// The no-registration reference: the moving ROI linearly resampled to the
/// fixed grid and thresholded at 0.5.
pub fn baseline_identity(pair: &ImagePair, roi_index: usize) -> RoiMask {
    let soft = warp::resize_mask_soft(&pair.rois[roi_index].mov, pair.fixed.h, pair.fixed.w);
    RoiMask {
        h: pair.fixed.h,
        w: pair.fixed.w,
        data: soft.data().iter().map(|v| *v > 0.5).collect(),
    }
}

/// One scored ROI within a patient evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoiEvalRow {
    pub pair_name: String,
    pub roi_index: usize,
    pub kind: String,
    pub adhoc: bool,
    pub error_mm: f64,
    pub fallback: bool,
}

/// Pooled per-patient accuracy: TRE over the patient's non-ad-hoc ROIs
/// across all of their image pairs, gland Dice per pair, ad-hoc errors
/// listed separately.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientEval {
    pub patient: usize,
    pub tre_mm: f64,
    pub rows: Vec<RoiEvalRow>,
    pub gland_dsc: Vec<(String, f64)>,
    pub adhoc_errors_mm: Vec<f64>,
}

impl PatientEval {
    pub fn adhoc_tre_mm(&self) -> Option<f64> {
        if self.adhoc_errors_mm.is_empty() {
            None
        } else {
            tre(&self.adhoc_errors_mm).ok()
        }
    }
}

/// Pool ROI rows of one patient into its evaluation record. Every non-ad-hoc
/// row feeds the TRE; ad-hoc rows are reported separately.
pub fn evaluate_patient(
    patient: usize,
    rows: Vec<RoiEvalRow>,
    gland_dsc: Vec<(String, f64)>,
) -> Result<PatientEval, MetricsError> {
    let standard: Vec<f64> = rows.iter().filter(|r| !r.adhoc).map(|r| r.error_mm).collect();
    let adhoc: Vec<f64> = rows.iter().filter(|r| r.adhoc).map(|r| r.error_mm).collect();
    let tre_mm = tre(&standard)?;
    Ok(PatientEval { patient, tre_mm, rows, gland_dsc, adhoc_errors_mm: adhoc })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Pairs retained after dropping zero differences.
    pub n_used: usize,
    pub dropped_zeros: usize,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

pub const WILCOXON_MIN_PAIRS: usize = 5;
const EXACT_LIMIT: usize = 12;

/// Midranks of |d|; ties share the average rank.
fn signed_midranks(diffs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..diffs.len()).collect();
    idx.sort_by(|a, b| diffs[*a].abs().partial_cmp(&diffs[*b].abs()).unwrap());
    let mut ranks = vec![0.0; diffs.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && diffs[idx[j + 1]].abs() == diffs[idx[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    (ranks, tie_sizes)
}

/// Exact two-sided p for the observed positive-rank sum under sign
/// symmetry, by dynamic programming over the rank multiset (doubled ranks
/// keep tied midranks integral).
pub fn wilcoxon_exact_p(diffs: &[f64]) -> f64 {
    let (ranks, _) = signed_midranks(diffs);
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled W+ = s.
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for r in &doubled {
        for s in (*r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let n_assignments = 2f64.powi(diffs.len() as i32);
    let w2: usize = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let p_le: f64 = counts[..=w2].iter().sum::<f64>() / n_assignments;
    let p_ge: f64 = counts[w2..].iter().sum::<f64>() / n_assignments;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Two-sided p from the tie-corrected normal approximation with continuity
/// correction.
pub fn wilcoxon_normal_p(diffs: &[f64]) -> f64 {
    let (ranks, ties) = signed_midranks(diffs);
    let n = diffs.len() as f64;
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let delta = w_plus - mean;
    let z = (delta.abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * (1.0 - normal_cdf(z))).min(1.0)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped; at least [`WILCOXON_MIN_PAIRS`] non-zero pairs are required.
/// Exact enumeration up to n = 12, normal approximation beyond.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::UnpairedLengths(x.len(), y.len()));
    }
    let raw: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let diffs: Vec<f64> = raw.iter().copied().filter(|d| *d != 0.0).collect();
    let dropped = raw.len() - diffs.len();
    if diffs.is_empty() {
        return Err(MetricsError::AllZeroDifferences);
    }
    if diffs.len() < WILCOXON_MIN_PAIRS {
        return Err(MetricsError::TooFewPairs(diffs.len(), WILCOXON_MIN_PAIRS));
    }
    let (ranks, _) = signed_midranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let (p, method) = if diffs.len() <= EXACT_LIMIT {
        (wilcoxon_exact_p(&diffs), WilcoxonMethod::Exact)
    } else {
        (wilcoxon_normal_p(&diffs), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult { w_plus, n_used: diffs.len(), dropped_zeros: dropped, p_two_sided: p, method })
}

/// Linear-interpolation quantile (the `q*(n-1)` positional convention).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q));
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile(&v, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centroid_single_pixel_golden() {
        // One pixel at (x=2, y=3), spacing 0.8 -> (1.6, 2.4) mm.
        let mut mask = RoiMask::empty(8, 8);
        mask.set(3, 2, true);
        let c = centroid_mask(&mask, 0.8).unwrap();
        assert!((c.x_mm - 1.6).abs() < 1e-12);
        assert!((c.y_mm - 2.4).abs() < 1e-12);
        assert_eq!(c.voxels, 1);
        assert!(!c.fallback);
    }

    #[test]
    fn centroid_symmetry_and_fallback() {
        let mut mask = RoiMask::empty(4, 4);
        mask.set(0, 0, true);
        mask.set(0, 2, true);
        let c = centroid_mask(&mask, 1.0).unwrap();
        assert_eq!((c.x_mm, c.y_mm), (1.0, 0.0));

        // Sub-threshold probability map: argmax with the fallback flag.
        let mut p = ProbMap { h: 3, w: 3, data: vec![0.0; 9] };
        p.data[1 * 3 + 2] = 0.4;
        let c = centroid_prob(&p, 0.5, 1.0).unwrap();
        assert!(c.fallback);
        assert_eq!((c.x_mm, c.y_mm), (2.0, 1.0));

        let zero = ProbMap { h: 2, w: 2, data: vec![0.0; 4] };
        assert!(matches!(centroid_prob(&zero, 0.5, 1.0), Err(MetricsError::AllZero)));
    }

    #[test]
    fn tre_golden_values() {
        assert_eq!(tre(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        let v = tre(&[3.0, 4.0]).unwrap();
        assert!((v - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(tre(&[2.5]).unwrap(), 2.5);
        assert!(tre(&[]).is_err());
    }

    #[test]
    fn dsc_golden_values() {
        let mut a = RoiMask::empty(4, 4);
        let mut b = RoiMask::empty(4, 4);
        for i in 0..4 {
            a.set(0, i, true);
        }
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        b.set(3, 0, true);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);

        // |A| = |B| = 4, |A∩B| = 2 -> 0.5.
        let mut c = RoiMask::empty(4, 4);
        c.set(0, 2, true);
        c.set(0, 3, true);
        c.set(1, 0, true);
        c.set(1, 1, true);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);

        assert!(dsc(&RoiMask::empty(4, 4), &RoiMask::empty(4, 4)).is_err());
    }

    #[test]
    fn wilcoxon_golden_one_two_three() {
        // Differences {1,2,3}: W+ = 6, exact two-sided p = 0.25.
        let x = vec![1.0, 2.0, 3.0];
        let p = wilcoxon_exact_p(&x);
        assert!((p - 0.25).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn wilcoxon_requires_five_nonzero_pairs() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = vec![0.0; 4];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &y),
            Err(MetricsError::TooFewPairs(4, 5))
        ));
        let same = vec![1.0; 6];
        assert!(matches!(
            wilcoxon_signed_rank(&same, &same),
            Err(MetricsError::AllZeroDifferences)
        ));
    }

    #[test]
    fn wilcoxon_swap_symmetry() {
        let x = vec![3.0, 1.0, 4.0, 1.5, 9.2, 2.6, 5.3];
        let y = vec![2.0, 1.8, 3.1, 2.0, 7.0, 3.0, 5.0];
        let a = wilcoxon_signed_rank(&x, &y).unwrap();
        let b = wilcoxon_signed_rank(&y, &x).unwrap();
        assert!((a.p_two_sided - b.p_two_sided).abs() < 1e-12);
    }

    #[test]
    fn exact_p_matches_brute_force_enumeration() {
        // Independent oracle: enumerate all sign patterns directly on the
        // midranks, no shared code with the DP implementation.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for n in 5..=10usize {
            for _ in 0..20 {
                let diffs: Vec<f64> = (0..n)
                    .map(|_| {
                        let d: f64 = rng.random_range(-5.0..5.0);
                        if d == 0.0 {
                            0.5
                        } else {
                            // Occasional exact ties in |d|.
                            if rng.random_range(0..4) == 0 {
                                d.signum() * 2.0
                            } else {
                                d
                            }
                        }
                    })
                    .collect();
                let (ranks, _) = signed_midranks(&diffs);
                let w_obs: f64 =
                    diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
                let mut le = 0usize;
                let mut ge = 0usize;
                for pattern in 0..(1usize << n) {
                    let w: f64 = (0..n)
                        .filter(|i| pattern & (1 << i) != 0)
                        .map(|i| ranks[i])
                        .sum();
                    if w <= w_obs + 1e-12 {
                        le += 1;
                    }
                    if w >= w_obs - 1e-12 {
                        ge += 1;
                    }
                }
                let total = (1usize << n) as f64;
                let brute = (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0);
                let fast = wilcoxon_exact_p(&diffs);
                assert!(
                    (brute - fast).abs() < 1e-9,
                    "n={n} diffs={diffs:?} brute={brute} fast={fast}"
                );
            }
        }
    }

    #[test]
    fn normal_approx_tracks_exact_for_small_n() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for n in [6usize, 9, 12] {
            for _ in 0..20 {
                let diffs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0f64)).collect();
                let diffs: Vec<f64> = diffs.into_iter().filter(|d| *d != 0.0).collect();
                if diffs.len() < 5 {
                    continue;
                }
                let exact = wilcoxon_exact_p(&diffs);
                let approx = wilcoxon_normal_p(&diffs);
                assert!((exact - approx).abs() <= 0.05, "exact {exact} approx {approx}");
            }
        }
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-12);
        assert!((normal_cdf(1.959963985) - 0.975).abs() < 1e-7);
        assert!((normal_cdf(-1.0) - 0.15865525393145707).abs() < 1e-9);
    }

    #[test]
    fn quantile_golden() {
        // {1,4,9}: median 4, p25 = 2.5, p75 = 6.5 by linear interpolation.
        let v = [1.0, 4.0, 9.0];
        assert_eq!(quantile(&v, 0.5), 4.0);
        assert_eq!(quantile(&v, 0.25), 2.5);
        assert_eq!(quantile(&v, 0.75), 6.5);
    }

    #[test]
    fn patient_eval_pools_and_separates_adhoc() {
        let rows = vec![
            RoiEvalRow {
                pair_name: "p000_00".into(),
                roi_index: 0,
                kind: "gland".into(),
                adhoc: false,
                error_mm: 3.0,
                fallback: false,
            },
            RoiEvalRow {
                pair_name: "p000_01".into(),
                roi_index: 1,
                kind: "landmark".into(),
                adhoc: false,
                error_mm: 4.0,
                fallback: false,
            },
            RoiEvalRow {
                pair_name: "p000_01".into(),
                roi_index: 2,
                kind: "calcification".into(),
                adhoc: true,
                error_mm: 9.0,
                fallback: false,
            },
        ];
        let eval = evaluate_patient(0, rows, vec![("p000_00".into(), 0.9)]).unwrap();
        assert!((eval.tre_mm - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(eval.adhoc_errors_mm, vec![9.0]);
        assert_eq!(eval.adhoc_tre_mm(), Some(9.0));
        // Internal consistency: the stored TRE equals tre() of its own rows.
        let errs: Vec<f64> =
            eval.rows.iter().filter(|r| !r.adhoc).map(|r| r.error_mm).collect();
        assert_eq!(eval.tre_mm, tre(&errs).unwrap());
    }

    proptest! {
        #[test]
        fn tre_is_scale_equivariant(
            errors in proptest::collection::vec(0.0f64..50.0, 1..12),
            c in 0.01f64..10.0,
        ) {
            let base = tre(&errors).unwrap();
            let scaled: Vec<f64> = errors.iter().map(|e| e * c).collect();
            let got = tre(&scaled).unwrap();
            prop_assert!((got - c * base).abs() <= 1e-9 * (1.0 + got));
        }

        #[test]
        fn dsc_is_symmetric_and_translation_invariant(
            seed in 0u64..1000,
            dy in 0usize..4,
            dx in 0usize..4,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = RoiMask::empty(16, 16);
            let mut b = RoiMask::empty(16, 16);
            for y in 2..10 {
                for x in 2..10 {
                    if rng.random_range(0..3) == 0 { a.set(y, x, true); }
                    if rng.random_range(0..3) == 0 { b.set(y, x, true); }
                }
            }
            prop_assume!(!a.is_empty() || !b.is_empty());
            let d1 = dsc(&a, &b).unwrap();
            let d2 = dsc(&b, &a).unwrap();
            prop_assert_eq!(d1, d2);

            // Translate both masks by the same offset.
            let mut at = RoiMask::empty(16, 16);
            let mut bt = RoiMask::empty(16, 16);
            for y in 0..16 {
                for x in 0..16 {
                    if y + dy < 16 && x + dx < 16 {
                        if a.at(y, x) { at.set(y + dy, x + dx, true); }
                        if b.at(y, x) { bt.set(y + dy, x + dx, true); }
                    }
                }
            }
            let d3 = dsc(&at, &bt).unwrap();
            prop_assert!((d1 - d3).abs() < 1e-12);
        }
    }
}
