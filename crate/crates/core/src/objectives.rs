//! Training losses for both paradigms, class-ratio weighting, the two-stage
//! minibatch sampler, and the training loop.
//!
//! Both networks train with the identical weighted cross-entropy on ROI
//! labels so the comparison isolates the paradigm; the registration loss
//! adds a weighted bending-energy term on the predicted field.

use crate::diffcore::{AdamState, DiffError, Graph, GraphBuilder, NodeId, Params, Real, Tensor};
use crate::grid::RoiMask;
use crate::models::{self, ArchConfig, ModelError, ModelKind};
use crate::synth::{Dataset, ImagePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training slice is empty (or no pair has a trainable ROI)")]
    EmptyDataset,
    #[error("degenerate label on pair {pair} roi {roi}: mask is {state}")]
    DegenerateLabel { pair: String, roi: usize, state: &'static str },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Background weight 1, foreground weight N_bg/N_fg of the target label.
    ClassRatio,
    Uniform,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub weight_mode: WeightMode,
    /// Log-argument clamp; keeps the cross-entropy bounded.
    pub eps: f64,
    /// Bending-energy weight, registration loss only.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weight_mode: WeightMode::ClassRatio, eps: 1e-7, lambda: 0.5 }
    }
}

impl LossConfig {
    /// Values swept in the bias-variance experiment for the baseline.
    pub const LAMBDA_SWEEP: [f64; 4] = [0.0, 0.1, 0.5, 2.0];

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(TrainError::InvalidConfig(format!("eps {} outside (0, 0.5)", self.eps)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(TrainError::InvalidConfig(format!("lambda {} invalid", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    WithReplacement,
    EpochShuffle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn desk(steps: u64, seed: u64) -> Self {
        TrainConfig {
            batch: 4,
            steps,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            sampling: SamplingMode::WithReplacement,
            precision: Precision::F32,
        }
    }

    /// Minibatch size 2, learning rate 1e-5.
    pub fn paper_preset(steps: u64, seed: u64) -> Self {
        TrainConfig { batch: 2, lr: 1e-5, ..Self::desk(steps, seed) }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::InvalidConfig("batch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// Class-ratio weights from one fixed-ROI label: background 1, foreground
/// N_bg/N_fg. Empty and full masks are degenerate.
pub fn class_weights(fixed_roi: &RoiMask) -> Result<(f64, f64), TrainError> {
    let fg = fixed_roi.count();
    let total = fixed_roi.data.len();
    if fg == 0 {
        return Err(TrainError::DegenerateLabel { pair: String::new(), roi: 0, state: "empty" });
    }
    if fg == total {
        return Err(TrainError::DegenerateLabel { pair: String::new(), roi: 0, state: "full" });
    }
    Ok(((total - fg) as f64 / fg as f64, 1.0))
}

/// Voxel-count-normalized weighted cross-entropy between a probability map
/// and a binary target. Reference implementation used by evaluation and
/// tests; the training path builds the same expression as graph ops.
pub fn weighted_ce(
    pred: &[f32],
    target: &RoiMask,
    weights: (f64, f64),
    eps: f64,
) -> Result<f64, TrainError> {
    if pred.len() != target.data.len() {
        return Err(TrainError::InvalidConfig(format!(
            "prediction has {} voxels, target {}",
            pred.len(),
            target.data.len()
        )));
    }
    let (w_fg, w_bg) = weights;
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(&target.data) {
        let p = (*p as f64).clamp(eps, 1.0 - eps);
        acc -= if *t { w_fg * p.ln() } else { w_bg * (1.0 - p).ln() };
    }
    Ok(acc / pred.len() as f64)
}

/// Append `-mean(w * (t*ln(p) + (1-t)*ln(1-p)))` on top of a probability
/// node; `t` and `w` are graph inputs supplied per sample.
fn append_weighted_ce(b: &mut GraphBuilder, prob: NodeId, target: NodeId, weight: NodeId, eps: f64) -> NodeId {
    let log_p = b.log_clamped(prob, eps);
    let fg = b.mul(target, log_p);
    let one_minus_p = b.affine(prob, -1.0, 1.0);
    let one_minus_t = b.affine(target, -1.0, 1.0);
    let log_q = b.log_clamped(one_minus_p, eps);
    let bg = b.mul(one_minus_t, log_q);
    let sum = b.add(fg, bg);
    let weighted = b.mul(weight, sum);
    let neg = b.affine(weighted, -1.0, 0.0);
    b.mean(neg)
}

/// Loss graph for one sampled (pair, ROI) element.
///
/// Inputs, in order: the network inputs for `kind`, then for `DdfReg` the
/// resample source (soft moving ROI), then the binary target and the
/// per-voxel weight map.
pub fn loss_graph(kind: ModelKind, arch: &ArchConfig, lc: &LossConfig) -> Result<Graph, TrainError> {
    arch.validate()?;
    lc.validate()?;
    let (h, w) = (arch.height, arch.width);
    let mut b = GraphBuilder::new();
    let net = models::append_net(&mut b, arch, kind);
    let loss = match kind {
        ModelKind::CondSeg => {
            let target = b.input(vec![1, h, w]);
            let weight = b.input(vec![1, h, w]);
            append_weighted_ce(&mut b, net.output, target, weight, lc.eps)
        }
        ModelKind::DdfReg => {
            let roi_src = b.input(vec![1, h, w]);
            let target = b.input(vec![1, h, w]);
            let weight = b.input(vec![1, h, w]);
            let warped = b.resample(roi_src, net.output);
            let ce = append_weighted_ce(&mut b, warped, target, weight, lc.eps);
            if lc.lambda > 0.0 {
                let be = b.bending_energy(net.output);
                let scaled = b.affine(be, lc.lambda, 0.0);
                b.add(ce, scaled)
            } else {
                ce
            }
        }
    };
    Ok(b.finish(vec![loss]))
}

/// Input tensors for one sampled element of `loss_graph`, in its input
/// order. Both loss graphs consume the same five tensors: the third slot is
/// the soft moving ROI on the fixed grid, used as the conditioning channel
/// by the segmentation loss and as the resample source by the registration
/// loss.
pub fn loss_inputs<T: Real>(
    pair: &ImagePair,
    roi_index: usize,
    lc: &LossConfig,
) -> Result<Vec<Tensor<T>>, TrainError> {
    let roi = &pair.rois[roi_index];
    let (w_fg, w_bg) = match lc.weight_mode {
        WeightMode::ClassRatio => class_weights(&roi.fix).map_err(|_| {
            TrainError::DegenerateLabel {
                pair: pair.name.clone(),
                roi: roi_index,
                state: if roi.fix.is_empty() { "empty" } else { "full" },
            }
        })?,
        WeightMode::Uniform => (1.0, 1.0),
    };
    let target = roi.fix.to_tensor::<T>();
    let weight = Tensor::from_vec(
        vec![1, roi.fix.h, roi.fix.w],
        roi.fix
            .data
            .iter()
            .map(|t| T::of_f64(if *t { w_fg } else { w_bg }))
            .collect(),
    );
    let fixed = pair.fixed.to_tensor::<T>();
    let moving = pair.moving.to_tensor::<T>();
    let roi_soft = crate::warp::resize_linear(&roi.mov.to_tensor::<T>(), pair.fixed.h, pair.fixed.w);
    Ok(vec![fixed, moving, roi_soft, target, weight])
}

/// Conditional-segmentation loss for one (pair, ROI) element.
pub fn condseg_loss(
    params: &Params<f32>,
    pair: &ImagePair,
    roi_index: usize,
    arch: &ArchConfig,
    lc: &LossConfig,
) -> Result<f64, TrainError> {
    let g = loss_graph(ModelKind::CondSeg, arch, lc)?;
    let inputs = loss_inputs::<f32>(pair, roi_index, lc)?;
    Ok(g.forward_scalar(params, &inputs)?.as_f64())
}

/// Registration loss (label term plus weighted bending energy) for one
/// (pair, ROI) element.
pub fn regnet_loss(
    params: &Params<f32>,
    pair: &ImagePair,
    roi_index: usize,
    arch: &ArchConfig,
    lc: &LossConfig,
) -> Result<f64, TrainError> {
    let g = loss_graph(ModelKind::DdfReg, arch, lc)?;
    let inputs = loss_inputs::<f32>(pair, roi_index, lc)?;
    Ok(g.forward_scalar(params, &inputs)?.as_f64())
}

/// Two-stage sampler: image pairs first, then one ROI of that pair per
/// element. `decks[p]` lists the sampleable ROI indices of pair `p`.
pub struct TwoStageSampler {
    mode: SamplingMode,
    order: Vec<usize>,
    cursor: usize,
}

impl TwoStageSampler {
    pub fn new(mode: SamplingMode) -> Self {
        TwoStageSampler { mode, order: Vec::new(), cursor: 0 }
    }

    pub fn sample_batch(
        &mut self,
        decks: &[Vec<usize>],
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(usize, usize)>, TrainError> {
        if decks.is_empty() || decks.iter().any(|d| d.is_empty()) {
            return Err(TrainError::EmptyDataset);
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let p = match self.mode {
                SamplingMode::WithReplacement => rng.random_range(0..decks.len()),
                SamplingMode::EpochShuffle => {
                    if self.cursor >= self.order.len() {
                        self.order = (0..decks.len()).collect();
                        use rand::seq::SliceRandom;
                        self.order.shuffle(rng);
                        self.cursor = 0;
                    }
                    let p = self.order[self.cursor];
                    self.cursor += 1;
                    p
                }
            };
            let deck = &decks[p];
            let r = deck[rng.random_range(0..deck.len())];
            out.push((p, r));
        }
        Ok(out)
    }
}

/// With-replacement two-stage sample: pair uniform over pairs, then ROI
/// uniform over that pair's sampleable ROIs, independently per element.
pub fn two_stage_sample(
    decks: &[Vec<usize>],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, TrainError> {
    TwoStageSampler::new(SamplingMode::WithReplacement).sample_batch(decks, batch, rng)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: Params<f32>,
    /// (step, minibatch loss); one row per step.
    pub curve: Vec<(u64, f64)>,
    pub graph: Graph,
}

/// Ratio of the smoothed final loss to the smoothed initial loss; the
/// smoothing window is 5% of the curve (at least one step).
pub fn smoothed_loss_ratio(curve: &[(u64, f64)]) -> f64 {
    if curve.is_empty() {
        return 1.0;
    }
    let k = (curve.len() / 20).max(1);
    let head: f64 = curve[..k].iter().map(|(_, l)| *l).sum::<f64>() / k as f64;
    let tail: f64 = curve[curve.len() - k..].iter().map(|(_, l)| *l).sum::<f64>() / k as f64;
    tail / head
}

/// Minibatch gradient descent: sampler -> loss -> backward -> Adam.
/// Deterministic for a fixed config; the checkpoint is bit-reproducible.
pub fn train(
    kind: ModelKind,
    data: &Dataset,
    pair_ids: &[usize],
    arch: &ArchConfig,
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<TrainOutput, TrainError> {
    tc.validate()?;
    lc.validate()?;
    match tc.precision {
        Precision::F32 => train_impl::<f32>(kind, data, pair_ids, arch, tc, lc),
        Precision::F64 => train_impl::<f64>(kind, data, pair_ids, arch, tc, lc),
    }
}

fn train_impl<T: Real>(
    kind: ModelKind,
    data: &Dataset,
    pair_ids: &[usize],
    arch: &ArchConfig,
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<TrainOutput, TrainError> {
    let pairs: Vec<&ImagePair> = pair_ids.iter().map(|i| &data.pairs[*i]).collect();
    let decks: Vec<Vec<usize>> = pairs.iter().map(|p| p.trainable_rois()).collect();
    if pairs.is_empty() || decks.iter().all(|d| d.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }
    if decks.iter().any(|d| d.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }

    let graph = loss_graph(kind, arch, lc)?;
    let init = Params::<f32>::init(graph.segments(), tc.seed);
    let mut params: Params<T> = init.cast();
    let mut adam = AdamState::<T>::new(params.len(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
    let mut sampler = TwoStageSampler::new(tc.sampling);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::io::derive_seed(tc.seed, 0x5a4d, 0));

    // Per-sample inputs are cached: the sampler revisits the same elements
    // constantly and assembly is pure.
    let mut input_cache: Vec<Vec<Option<Vec<Tensor<T>>>>> =
        pairs.iter().map(|p| vec![None; p.rois.len()]).collect();

    let mut curve = Vec::with_capacity(tc.steps as usize);
    let mut grad_acc = vec![T::zero(); params.len()];
    for step in 0..tc.steps {
        let batch = sampler.sample_batch(&decks, tc.batch, &mut rng)?;
        for g in &mut grad_acc {
            *g = T::zero();
        }
        let mut loss_acc = 0.0f64;
        for (p, r) in batch {
            if input_cache[p][r].is_none() {
                input_cache[p][r] = Some(loss_inputs::<T>(pairs[p], r, lc)?);
            }
            let inputs = input_cache[p][r].as_ref().unwrap();
            let (loss, grad) = graph
                .backward(&params, inputs)
                .map_err(|e| match e {
                    DiffError::NonFinite { .. } | DiffError::NonFiniteGrad => {
                        TrainError::NonFiniteLoss { step }
                    }
                    other => TrainError::Diff(other),
                })?;
            loss_acc += loss.as_f64();
            for (a, g) in grad_acc.iter_mut().zip(&grad) {
                *a = *a + *g;
            }
        }
        let scale = T::of_f64(1.0 / tc.batch as f64);
        for g in &mut grad_acc {
            *g = *g * scale;
        }
        let mean_loss = loss_acc / tc.batch as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        adam.step(&mut params.values, &grad_acc)?;
        curve.push((step, mean_loss));
    }

    let out_params: Params<f32> = params.cast();
    Ok(TrainOutput { params: Params { values: out_params.values, seed: tc.seed }, curve, graph })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn tiny_dataset(seed: u64) -> Dataset {
        let mut cfg = SynthConfig::desk(2, seed);
        cfg.height = 32;
        cfg.width = 32;
        cfg.amplitude_px = 3.0;
        cfg.smoothness_px = 10.0;
        synth::generate(&cfg).unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig { levels: 2, base_channels: 2, kernel: 3, height: 32, width: 32 }
    }

    #[test]
    fn class_weights_golden() {
        let mut m = RoiMask::empty(10, 10);
        for i in 0..25 {
            m.set(i / 10, i % 10, true);
        }
        assert_eq!(class_weights(&m).unwrap(), (3.0, 1.0));

        let mut balanced = RoiMask::empty(2, 2);
        balanced.set(0, 0, true);
        balanced.set(0, 1, true);
        assert_eq!(class_weights(&balanced).unwrap(), (1.0, 1.0));

        assert!(class_weights(&RoiMask::empty(4, 4)).is_err());
        let full = RoiMask { h: 2, w: 2, data: vec![true; 4] };
        assert!(class_weights(&full).is_err());
    }

    #[test]
    fn weighted_ce_single_voxel_golden() {
        // target = fg, p = 0.5, w_fg = 3: loss = 3*ln(2).
        let mut t = RoiMask::empty(1, 1);
        t.set(0, 0, true);
        let loss = weighted_ce(&[0.5], &t, (3.0, 1.0), 1e-7).unwrap();
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-9, "loss = {loss}");
    }

    #[test]
    fn weighted_ce_perfect_prediction_hits_clamp_floor() {
        let mut t = RoiMask::empty(2, 2);
        t.set(0, 0, true);
        let pred = [1.0f32, 0.0, 0.0, 0.0];
        let eps = 1e-7;
        let loss = weighted_ce(&pred, &t, (3.0, 1.0), eps).unwrap();
        // Every voxel contributes exactly w * -ln(1-eps) under the clamp.
        let expect = (3.0 + 1.0 + 1.0 + 1.0) * (-(1.0f64 - eps).ln()) / 4.0;
        assert!((loss - expect).abs() < 1e-12, "loss {loss} expect {expect}");
        assert!(loss >= 0.0 && loss < 1e-6);
    }

    #[test]
    fn weighted_ce_label_swap_symmetry() {
        // Dyadic probabilities keep 1-p exact, so equality is bitwise.
        let mut t = RoiMask::empty(2, 3);
        t.set(0, 1, true);
        t.set(1, 2, true);
        let pred = [0.25f32, 0.8125, 0.125, 0.4375, 0.875, 0.625];
        let a = weighted_ce(&pred, &t, (2.5, 1.0), 1e-7).unwrap();
        let flipped: Vec<f32> = pred.iter().map(|p| 1.0 - p).collect();
        let t_flip = RoiMask { h: 2, w: 3, data: t.data.iter().map(|v| !v).collect() };
        let b = weighted_ce(&flipped, &t_flip, (1.0, 2.5), 1e-7).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn graph_ce_matches_reference_implementation() {
        let ds = tiny_dataset(3);
        let arch = tiny_arch();
        let lc = LossConfig::default();
        let g = loss_graph(ModelKind::CondSeg, &arch, &lc).unwrap();
        let params = Params::<f32>::init(g.segments(), 5);
        let pair = &ds.pairs[0];
        let roi = pair.trainable_rois()[0];
        let inputs = loss_inputs::<f32>(pair, roi, &lc).unwrap();
        let graph_loss = g.forward_scalar(&params, &inputs).unwrap() as f64;

        let net = models::build_condseg(&arch).unwrap();
        let prob =
            models::predict_roi(&net, &params, &pair.fixed, &pair.moving, &pair.rois[roi].mov)
                .unwrap();
        let weights = class_weights(&pair.rois[roi].fix).unwrap();
        let reference = weighted_ce(&prob.data, &pair.rois[roi].fix, weights, lc.eps).unwrap();
        assert!(
            (graph_loss - reference).abs() <= 1e-5 * reference.abs().max(1.0),
            "graph {graph_loss} vs reference {reference}"
        );
    }

    #[test]
    fn zero_ddf_regnet_loss_equals_plain_ce_and_is_monotone_in_lambda() {
        let ds = tiny_dataset(4);
        let arch = tiny_arch();
        let pair = &ds.pairs[1];
        let roi = pair.trainable_rois()[0];

        // Zero-initialized head: DDF == 0, so bending energy is 0 and the
        // loss equals the cross-entropy of the resampled moving ROI at any
        // lambda.
        let lc0 = LossConfig { lambda: 0.0, ..Default::default() };
        let g = loss_graph(ModelKind::DdfReg, &arch, &lc0).unwrap();
        let params = Params::<f32>::init(g.segments(), 6);
        let l0 = regnet_loss(&params, pair, roi, &arch, &lc0).unwrap();
        let l5 = regnet_loss(&params, pair, roi, &arch, &LossConfig { lambda: 5.0, ..lc0 }).unwrap();
        assert!((l0 - l5).abs() < 1e-9, "zero field: {l0} vs {l5}");

        // With a non-trivial field, the loss is non-decreasing in lambda.
        let mut bent = params.clone();
        for v in &mut bent.values[g.segments().by_name("head.w").unwrap().offset..] {
            *v = 0.05;
        }
        let mut prev = 0.0;
        for (i, lambda) in LossConfig::LAMBDA_SWEEP.iter().enumerate() {
            let l = regnet_loss(&bent, pair, roi, &arch, &LossConfig { lambda: *lambda, ..lc0 })
                .unwrap();
            if i > 0 {
                assert!(l >= prev - 1e-12, "lambda {lambda}: {l} < {prev}");
            }
            prev = l;
        }
    }

    #[test]
    fn sampler_is_deterministic_and_uniform_over_pairs_then_rois() {
        // Pair 0 has 1 ROI, pair 1 has 3: each of pair 1's ROIs must appear
        // with frequency 1/6 (within 3 binomial standard errors of 1e4 draws).
        let decks = vec![vec![0], vec![0, 1, 2]];
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let s = two_stage_sample(&decks, 1, &mut rng).unwrap()[0];
            match s {
                (0, 0) => counts[0] += 1,
                (1, r) => counts[1 + r] += 1,
                other => panic!("unexpected sample {other:?}"),
            }
        }
        let se = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        let half = counts[0] as f64 / n as f64;
        assert!((half - 0.5).abs() <= 3.0 * se(0.5), "pair-0 rate {half}");
        for c in &counts[1..] {
            let rate = *c as f64 / n as f64;
            let p = 1.0 / 6.0;
            assert!((rate - p).abs() <= 3.0 * se(p), "roi rate {rate}");
        }

        // Seeded rng: identical sequences across runs.
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = two_stage_sample(&decks, 16, &mut r1).unwrap();
        let b = two_stage_sample(&decks, 16, &mut r2).unwrap();
        assert_eq!(a, b);

        // Single pair, single ROI: every element is (0,0).
        let single = vec![vec![0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(two_stage_sample(&single, 8, &mut rng)
            .unwrap()
            .iter()
            .all(|s| *s == (0, 0)));

        assert!(two_stage_sample(&[], 4, &mut rng).is_err());
    }

    #[test]
    fn epoch_shuffle_visits_every_pair_per_epoch() {
        let decks = vec![vec![0], vec![0], vec![0], vec![0]];
        let mut sampler = TwoStageSampler::new(SamplingMode::EpochShuffle);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sampler.sample_batch(&decks, 4, &mut rng).unwrap();
        let mut seen: Vec<usize> = batch.iter().map(|(p, _)| *p).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = tiny_dataset(5);
        let arch = tiny_arch();
        let tc = TrainConfig::desk(0, 11);
        let out = train(ModelKind::CondSeg, &ds, &[0, 1], &arch, &tc, &LossConfig::default())
            .unwrap();
        let init = Params::<f32>::init(out.graph.segments(), 11);
        assert_eq!(out.params.values, init.values);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let ds = tiny_dataset(6);
        let arch = tiny_arch();
        let tc = TrainConfig { steps: 5, ..TrainConfig::desk(5, 21) };
        let lc = LossConfig::default();
        let a = train(ModelKind::CondSeg, &ds, &[0, 1, 2], &arch, &tc, &lc).unwrap();
        let b = train(ModelKind::CondSeg, &ds, &[0, 1, 2], &arch, &tc, &lc).unwrap();
        assert_eq!(a.params.values, b.params.values);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 5);
        assert!(a.curve.iter().all(|(_, l)| l.is_finite() && *l > 0.0));
    }

    #[test]
    fn loss_is_invariant_to_pair_container_order() {
        let ds = tiny_dataset(7);
        let arch = tiny_arch();
        let lc = LossConfig::default();
        let g = loss_graph(ModelKind::CondSeg, &arch, &lc).unwrap();
        let params = Params::<f32>::init(g.segments(), 2);
        // Same (pair, roi) content addressed through two different orders.
        let roi = ds.pairs[1].trainable_rois()[0];
        let direct = {
            let inputs = loss_inputs::<f32>(&ds.pairs[1], roi, &lc).unwrap();
            g.backward(&params, &inputs).unwrap()
        };
        let mut reordered = ds.clone();
        reordered.pairs.swap(0, 1);
        let via_swapped = {
            let inputs =
                loss_inputs::<f32>(&reordered.pairs[0], roi, &lc).unwrap();
            g.backward(&params, &inputs).unwrap()
        };
        assert_eq!(direct.0, via_swapped.0);
        assert_eq!(direct.1, via_swapped.1);
    }
}
