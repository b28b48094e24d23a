//! Patient-level repeated k-fold cross-validation over a ladder of
//! training-set sizes, per-ROI centroid collection across repeats, and the
//! bias/variance decomposition of centroid error.
//!
//! For a size/fold pair (S, k) each repeat selects n_sel = S*k/(k-1)
//! patients and runs k-fold over them, so every run trains on exactly S
//! patients and each selected patient is tested exactly once per repeat.

use crate::grid::RoiMask;
use crate::io::{self, derive_seed, IoError};
use crate::metrics::{self, MetricsError, PatientEval, RoiEvalRow};
use crate::models::{self, ArchConfig, ModelKind};
use crate::objectives::{self, LossConfig, TrainConfig, TrainError};
use crate::synth::Dataset;
use crate::warp;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("infeasible size/fold pair (S={size}, k={folds}): {reason}")]
    Infeasible { size: usize, folds: usize, reason: String },
    #[error("plan needs at least one size and one repeat")]
    Empty,
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("ROI {0} has {1} predicted centroids; decomposition needs >= 2")]
    TooFewRepeats(String, usize),
    #[error("empty group: {0}")]
    EmptyGroup(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub train_size: usize,
    pub folds: usize,
}

/// One training/evaluation run of the plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldRun {
    pub id: String,
    pub train_size: usize,
    pub folds: usize,
    pub repeat: usize,
    pub fold: usize,
    pub train_patients: Vec<usize>,
    pub test_patients: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvPlan {
    pub n_patients: usize,
    pub repeats: usize,
    pub sizes: Vec<SizeSpec>,
    pub seed: u64,
    pub runs: Vec<FoldRun>,
}

const TAG_SELECT: u64 = 0xC5;
const TAG_RUN: u64 = 0xC6;

/// Deterministic plan: per (size, repeat) draw the patient subset, split it
/// into k folds, and train each run on the fold's complement.
pub fn make_cv_plan(
    n_patients: usize,
    sizes: &[SizeSpec],
    repeats: usize,
    seed: u64,
) -> Result<CvPlan, PlanError> {
    if sizes.is_empty() || repeats == 0 || n_patients == 0 {
        return Err(PlanError::Empty);
    }
    let mut runs = Vec::new();
    for (si, spec) in sizes.iter().enumerate() {
        let (s, k) = (spec.train_size, spec.folds);
        let fail = |reason: String| PlanError::Infeasible { size: s, folds: k, reason };
        if k < 2 {
            return Err(fail("need at least 2 folds".into()));
        }
        if s == 0 {
            return Err(fail("training size must be positive".into()));
        }
        if (s * k) % (k - 1) != 0 {
            return Err(fail(format!("S*k/(k-1) = {}*{}/{} is not integral", s, k, k - 1)));
        }
        let n_sel = s * k / (k - 1);
        if n_sel > n_patients {
            return Err(fail(format!("needs {n_sel} patients, universe has {n_patients}")));
        }
        // Fold size n_sel/k = S/(k-1) is integral whenever n_sel is.
        let fold_size = n_sel / k;
        for repeat in 0..repeats {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SELECT, ((si as u64) << 32) | repeat as u64));
            let mut universe: Vec<usize> = (0..n_patients).collect();
            universe.shuffle(&mut rng);
            let selected = &universe[..n_sel];
            for fold in 0..k {
                let test: Vec<usize> = selected[fold * fold_size..(fold + 1) * fold_size].to_vec();
                let train: Vec<usize> =
                    selected.iter().copied().filter(|p| !test.contains(p)).collect();
                let run_index = runs.len() as u64;
                runs.push(FoldRun {
                    id: format!("s{s:03}k{k:02}_r{repeat:02}_f{fold:02}"),
                    train_size: s,
                    folds: k,
                    repeat,
                    fold,
                    train_patients: train,
                    test_patients: test,
                    seed: derive_seed(seed, TAG_RUN, run_index),
                });
            }
        }
    }
    Ok(CvPlan { n_patients, repeats, sizes: sizes.to_vec(), seed, runs })
}

/// Prediction for one test ROI of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoiOutcome {
    pub patient: usize,
    pub pair_name: String,
    pub roi_index: usize,
    pub kind: String,
    pub adhoc: bool,
    pub pred_x_mm: f64,
    pub pred_y_mm: f64,
    pub fallback: bool,
    pub gt_x_mm: f64,
    pub gt_y_mm: f64,
    pub error_mm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Done,
    Failed,
}

/// Ledger entry: one JSON file per run, committed atomically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub model: String,
    pub train_size: usize,
    pub folds: usize,
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub final_loss: Option<f64>,
    pub checkpoint_path: Option<String>,
    pub rois: Vec<RoiOutcome>,
    pub patients: Vec<PatientEval>,
}

fn run_file(runs_dir: &Path, model: ModelKind, run: &FoldRun) -> PathBuf {
    runs_dir.join(format!("run_{}_{}.json", model.as_str(), run.id))
}

/// Predict every ROI of one test pair with the trained model and score it.
fn predict_pair_outcomes(
    kind: ModelKind,
    arch: &ArchConfig,
    params: &crate::diffcore::Params<f32>,
    pair: &crate::synth::ImagePair,
) -> Result<(Vec<RoiOutcome>, Vec<(String, f64)>), PlanError> {
    let spacing = pair.fixed.spacing_mm;
    let mut outcomes = Vec::with_capacity(pair.rois.len());
    let mut gland_dsc = Vec::new();

    // Per-pair prediction context: the registration model predicts one
    // field per pair; the conditional model answers one query per ROI.
    let mut prob_masks: Vec<(Vec<f32>, RoiMask)> = Vec::with_capacity(pair.rois.len());
    match kind {
        ModelKind::CondSeg => {
            let net = models::build_condseg(arch)?;
            for roi in &pair.rois {
                let prob = models::predict_roi(&net, params, &pair.fixed, &pair.moving, &roi.mov)?;
                let mask = prob.threshold(0.5);
                prob_masks.push((prob.data, mask));
            }
        }
        ModelKind::DdfReg => {
            let net = models::build_ddfreg(arch)?;
            let ddf = models::predict_ddf(&net, params, &pair.fixed, &pair.moving)?;
            let field = ddf.to_tensor::<f32>();
            for roi in &pair.rois {
                let soft = warp::resample_bilinear(&roi.mov.to_tensor::<f32>(), &field)
                    .map_err(|_| TrainError::NonFiniteLoss { step: 0 })?;
                let values = soft.into_data();
                let mask = RoiMask {
                    h: pair.fixed.h,
                    w: pair.fixed.w,
                    data: values.iter().map(|v| *v > 0.5).collect(),
                };
                prob_masks.push((values, mask));
            }
        }
    }

    for (i, roi) in pair.rois.iter().enumerate() {
        let (values, mask) = &prob_masks[i];
        let pred = metrics::centroid_of(values, pair.fixed.h, pair.fixed.w, 0.5, spacing)?;
        let gt = metrics::centroid_mask(&roi.fix, spacing)?;
        outcomes.push(RoiOutcome {
            patient: pair.patient,
            pair_name: pair.name.clone(),
            roi_index: i,
            kind: roi.kind.as_str().to_string(),
            adhoc: roi.adhoc,
            pred_x_mm: pred.x_mm,
            pred_y_mm: pred.y_mm,
            fallback: pred.fallback,
            gt_x_mm: gt.x_mm,
            gt_y_mm: gt.y_mm,
            error_mm: pred.distance_mm(&gt),
        });
        if roi.kind == crate::synth::RoiKind::Gland {
            gland_dsc.push((pair.name.clone(), metrics::dsc(mask, &roi.fix).unwrap_or(0.0)));
        }
    }
    Ok((outcomes, gland_dsc))
}

/// Group per-ROI outcomes into per-patient evaluations.
pub fn patient_evals(
    rois: &[RoiOutcome],
    gland_dsc: &[(usize, String, f64)],
) -> Result<Vec<PatientEval>, MetricsError> {
    let mut by_patient: BTreeMap<usize, Vec<RoiEvalRow>> = BTreeMap::new();
    for r in rois {
        by_patient.entry(r.patient).or_default().push(RoiEvalRow {
            pair_name: r.pair_name.clone(),
            roi_index: r.roi_index,
            kind: r.kind.clone(),
            adhoc: r.adhoc,
            error_mm: r.error_mm,
            fallback: r.fallback,
        });
    }
    let mut out = Vec::new();
    for (patient, rows) in by_patient {
        let dsc: Vec<(String, f64)> = gland_dsc
            .iter()
            .filter(|(p, _, _)| *p == patient)
            .map(|(_, name, d)| (name.clone(), *d))
            .collect();
        out.push(metrics::evaluate_patient(patient, rows, dsc)?);
    }
    Ok(out)
}

fn execute_run(
    run: &FoldRun,
    model: ModelKind,
    dataset: &Dataset,
    arch: &ArchConfig,
    tc: &TrainConfig,
    lc: &LossConfig,
    out_dir: &Path,
) -> RunRecord {
    let mut record = RunRecord {
        id: run.id.clone(),
        model: model.as_str().to_string(),
        train_size: run.train_size,
        folds: run.folds,
        repeat: run.repeat,
        fold: run.fold,
        seed: run.seed,
        status: RunStatus::Failed,
        error: None,
        final_loss: None,
        checkpoint_path: None,
        rois: Vec::new(),
        patients: Vec::new(),
    };
    let train_pairs = dataset.pair_ids_for_patients(&run.train_patients);
    let run_tc = TrainConfig { seed: run.seed, ..*tc };
    let trained = match objectives::train(model, dataset, &train_pairs, arch, &run_tc, lc) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.final_loss = trained.curve.last().map(|(_, l)| *l);

    let ckpt_dir = out_dir.join("checkpoints").join(format!("{}_{}", model.as_str(), run.id));
    if let Err(e) = models::save_checkpoint(
        &ckpt_dir,
        model,
        arch,
        &trained.graph,
        &trained.params,
        run_tc.steps,
    ) {
        record.error = Some(e.to_string());
        return record;
    }
    record.checkpoint_path = Some(ckpt_dir.display().to_string());

    let mut rois = Vec::new();
    let mut gland = Vec::new();
    for pid in dataset.pair_ids_for_patients(&run.test_patients) {
        let pair = &dataset.pairs[pid];
        match predict_pair_outcomes(model, arch, &trained.params, pair) {
            Ok((mut r, d)) => {
                for (name, v) in d {
                    gland.push((pair.patient, name, v));
                }
                rois.append(&mut r);
            }
            Err(e) => {
                record.error = Some(e.to_string());
                return record;
            }
        }
    }
    match patient_evals(&rois, &gland) {
        Ok(p) => {
            record.patients = p;
            record.rois = rois;
            record.status = RunStatus::Done;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Execute (or resume) every run of the plan for one model kind. Completed
/// runs are skipped via the ledger; failed runs stay recorded. Independent
/// runs may execute concurrently; each commits its own file atomically.
pub fn run_plan(
    plan: &CvPlan,
    model: ModelKind,
    dataset: &Dataset,
    arch: &ArchConfig,
    tc: &TrainConfig,
    lc: &LossConfig,
    out_dir: &Path,
    parallel: usize,
) -> Result<Vec<RunRecord>, PlanError> {
    let runs_dir = out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)
        .map_err(|e| IoError::File { path: runs_dir.display().to_string(), source: e })?;

    let work = |run: &FoldRun| -> Result<RunRecord, PlanError> {
        let path = run_file(&runs_dir, model, run);
        if path.exists() {
            if let Ok(existing) = io::read_json::<RunRecord>(&path) {
                return Ok(existing);
            }
        }
        let record = execute_run(run, model, dataset, arch, tc, lc, out_dir);
        io::write_json_atomic(&path, &record)?;
        Ok(record)
    };

    let records: Vec<Result<RunRecord, PlanError>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .expect("thread pool");
        pool.install(|| plan.runs.par_iter().map(work).collect())
    } else {
        plan.runs.iter().map(work).collect()
    };
    records.into_iter().collect()
}

/// Load every ledger entry under `out_dir/runs`, sorted by file name.
pub fn load_ledger(out_dir: &Path) -> Result<Vec<RunRecord>, PlanError> {
    let runs_dir = out_dir.join("runs");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&runs_dir)
        .map_err(|e| IoError::File { path: runs_dir.display().to_string(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(io::read_json::<RunRecord>(&p)?);
    }
    Ok(out)
}

/// Per-ROI bias/variance decomposition across repeats.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasVarRecord {
    pub patient: usize,
    pub pair_name: String,
    pub roi_index: usize,
    pub kind: String,
    pub adhoc: bool,
    pub gt_mm: [f64; 2],
    pub centroids_mm: Vec<[f64; 2]>,
    pub d_bias2: f64,
    pub d_var2: f64,
    pub mse: f64,
}

/// d_bias2 = |mean(c) - g|^2, d_var2 = mean |c - mean(c)|^2,
/// mse = mean |c - g|^2; the three satisfy mse = d_bias2 + d_var2.
pub fn decompose_one(gt: [f64; 2], centroids: &[[f64; 2]]) -> (f64, f64, f64) {
    let n = centroids.len() as f64;
    let mean = centroids
        .iter()
        .fold([0.0f64; 2], |acc, c| [acc[0] + c[0] / n, acc[1] + c[1] / n]);
    let d_bias2 = (mean[0] - gt[0]).powi(2) + (mean[1] - gt[1]).powi(2);
    let d_var2 = centroids
        .iter()
        .map(|c| (c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2))
        .sum::<f64>()
        / n;
    let mse = centroids
        .iter()
        .map(|c| (c[0] - gt[0]).powi(2) + (c[1] - gt[1]).powi(2))
        .sum::<f64>()
        / n;
    (d_bias2, d_var2, mse)
}

/// Decompose centroid scatter for every ROI present in the completed runs of
/// one (model, size) group. ROIs observed fewer than two times are an error,
/// matching the repeated-CV contract.
pub fn decompose(records: &[&RunRecord]) -> Result<Vec<BiasVarRecord>, PlanError> {
    #[allow(clippy::type_complexity)]
    let mut by_roi: BTreeMap<(usize, String, usize), (Vec<[f64; 2]>, [f64; 2], String, bool)> =
        BTreeMap::new();
    for rec in records {
        if rec.status != RunStatus::Done {
            continue;
        }
        for r in &rec.rois {
            let key = (r.patient, r.pair_name.clone(), r.roi_index);
            let entry = by_roi
                .entry(key)
                .or_insert_with(|| (Vec::new(), [r.gt_x_mm, r.gt_y_mm], r.kind.clone(), r.adhoc));
            entry.0.push([r.pred_x_mm, r.pred_y_mm]);
        }
    }
    let mut out = Vec::with_capacity(by_roi.len());
    for ((patient, pair_name, roi_index), (centroids, gt, kind, adhoc)) in by_roi {
        if centroids.len() < 2 {
            return Err(PlanError::TooFewRepeats(
                format!("{pair_name}/roi{roi_index}"),
                centroids.len(),
            ));
        }
        let (d_bias2, d_var2, mse) = decompose_one(gt, &centroids);
        out.push(BiasVarRecord {
            patient,
            pair_name,
            roi_index,
            kind,
            adhoc,
            gt_mm: gt,
            centroids_mm: centroids,
            d_bias2,
            d_var2,
            mse,
        });
    }
    Ok(out)
}

/// One row of the experiment summary for a (model, training size) group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub size: usize,
    pub repeat_count: usize,
    pub mean_tre: f64,
    pub median_tre: f64,
    pub p25_tre: f64,
    pub p75_tre: f64,
    pub median_dbias2: f64,
    pub p25_dbias2: f64,
    pub p75_dbias2: f64,
    pub median_dvar2: f64,
    pub adhoc_median_tre: f64,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Aggregate the ledger into per-(model, size) summary rows: TRE statistics
/// over (run, patient) pairs, bias/variance medians over non-ad-hoc ROIs,
/// ad-hoc TRE reported separately.
pub fn aggregate(ledger: &[RunRecord]) -> Result<Vec<SummaryRow>, PlanError> {
    let mut groups: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for rec in ledger {
        groups.entry((rec.model.clone(), rec.train_size)).or_default().push(rec);
    }
    let mut rows = Vec::new();
    for ((model, size), records) in groups {
        let done: Vec<&RunRecord> =
            records.iter().copied().filter(|r| r.status == RunStatus::Done).collect();
        if done.is_empty() {
            return Err(PlanError::EmptyGroup(format!("{model}/S={size}")));
        }
        let tres: Vec<f64> =
            done.iter().flat_map(|r| r.patients.iter().map(|p| p.tre_mm)).collect();
        if tres.is_empty() {
            return Err(PlanError::EmptyGroup(format!("{model}/S={size}: no patient evals")));
        }
        let adhoc_tres: Vec<f64> = done
            .iter()
            .flat_map(|r| r.patients.iter().filter_map(|p| p.adhoc_tre_mm()))
            .collect();
        let bv = decompose(&done)?;
        let dbias2 = sorted(bv.iter().filter(|b| !b.adhoc).map(|b| b.d_bias2).collect());
        let dvar2 = sorted(bv.iter().filter(|b| !b.adhoc).map(|b| b.d_var2).collect());
        if dbias2.is_empty() {
            return Err(PlanError::EmptyGroup(format!("{model}/S={size}: no ROI records")));
        }
        let tres_sorted = sorted(tres.clone());
        let repeat_count = {
            let mut reps: Vec<usize> = done.iter().map(|r| r.repeat).collect();
            reps.sort_unstable();
            reps.dedup();
            reps.len()
        };
        rows.push(SummaryRow {
            model,
            size,
            repeat_count,
            mean_tre: tres.iter().sum::<f64>() / tres.len() as f64,
            median_tre: metrics::quantile(&tres_sorted, 0.5),
            p25_tre: metrics::quantile(&tres_sorted, 0.25),
            p75_tre: metrics::quantile(&tres_sorted, 0.75),
            median_dbias2: metrics::quantile(&dbias2, 0.5),
            p25_dbias2: metrics::quantile(&dbias2, 0.25),
            p75_dbias2: metrics::quantile(&dbias2, 0.75),
            median_dvar2: metrics::quantile(&dvar2, 0.5),
            adhoc_median_tre: if adhoc_tres.is_empty() {
                f64::NAN
            } else {
                metrics::quantile(&sorted(adhoc_tres), 0.5)
            },
        });
    }
    Ok(rows)
}

pub const SUMMARY_HEADER: &str = "model,size,repeat_count,mean_tre,median_tre,p25_tre,p75_tre,median_dbias2,p25_dbias2,p75_dbias2,median_dvar2,adhoc_median_tre";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.model,
            r.size,
            r.repeat_count,
            r.mean_tre,
            r.median_tre,
            r.p25_tre,
            r.p75_tre,
            r.median_dbias2,
            r.p25_dbias2,
            r.p75_dbias2,
            r.median_dvar2,
            r.adhoc_median_tre
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    #[test]
    fn plan_golden_counts() {
        // Paper-scale quadruples over 80 patients: 300 fold-runs per model.
        let sizes = [
            SizeSpec { train_size: 40, folds: 2 },
            SizeSpec { train_size: 60, folds: 4 },
            SizeSpec { train_size: 70, folds: 8 },
            SizeSpec { train_size: 75, folds: 16 },
        ];
        let plan = make_cv_plan(80, &sizes, 10, 1).unwrap();
        assert_eq!(plan.runs.len(), 300);

        // Two patients, train on one, test the other.
        let tiny = make_cv_plan(2, &[SizeSpec { train_size: 1, folds: 2 }], 1, 7).unwrap();
        assert_eq!(tiny.runs.len(), 2);
        for run in &tiny.runs {
            assert_eq!(run.train_patients.len(), 1);
            assert_eq!(run.test_patients.len(), 1);
            assert_ne!(run.train_patients[0], run.test_patients[0]);
        }

        // (S=6, k=4, R=5, 8 patients): 20 runs, each patient tested once per
        // repeat.
        let plan = make_cv_plan(8, &[SizeSpec { train_size: 6, folds: 4 }], 5, 3).unwrap();
        assert_eq!(plan.runs.len(), 20);
        for repeat in 0..5 {
            let mut tested: Vec<usize> = plan
                .runs
                .iter()
                .filter(|r| r.repeat == repeat)
                .flat_map(|r| r.test_patients.clone())
                .collect();
            tested.sort_unstable();
            assert_eq!(tested, (0..8).collect::<Vec<_>>());
        }
        for run in &plan.runs {
            assert_eq!(run.train_patients.len(), 6);
            for p in &run.test_patients {
                assert!(!run.train_patients.contains(p));
            }
        }
    }

    #[test]
    fn infeasible_combinations_are_rejected() {
        assert!(make_cv_plan(10, &[SizeSpec { train_size: 5, folds: 3 }], 2, 0).is_err());
        assert!(make_cv_plan(10, &[SizeSpec { train_size: 40, folds: 2 }], 2, 0).is_err());
        assert!(make_cv_plan(10, &[SizeSpec { train_size: 4, folds: 1 }], 2, 0).is_err());
        assert!(make_cv_plan(10, &[], 2, 0).is_err());
    }

    #[test]
    fn plan_is_deterministic() {
        let sizes = [SizeSpec { train_size: 12, folds: 2 }];
        let a = make_cv_plan(24, &sizes, 3, 9).unwrap();
        let b = make_cv_plan(24, &sizes, 3, 9).unwrap();
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.train_patients, y.train_patients);
            assert_eq!(x.seed, y.seed);
        }
    }

    #[test]
    fn decompose_golden_and_identity() {
        // c = {(0,0),(2,0)}, g = (1,1): bias 1, var 1, mse 2.
        let (b, v, m) = decompose_one([1.0, 1.0], &[[0.0, 0.0], [2.0, 0.0]]);
        assert!((b - 1.0).abs() < 1e-15);
        assert!((v - 1.0).abs() < 1e-15);
        assert!((m - 2.0).abs() < 1e-15);

        // All centroids on the truth: (0, 0).
        let (b, v, m) = decompose_one([3.0, -2.0], &[[3.0, -2.0], [3.0, -2.0], [3.0, -2.0]]);
        assert_eq!((b, v, m), (0.0, 0.0, 0.0));

        // Random instances: mse == bias + var to 1e-9 relative.
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let g = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let n = rng.random_range(2..9);
            let cs: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
                .collect();
            let (b, v, m) = decompose_one(g, &cs);
            assert!((m - (b + v)).abs() <= 1e-9 * m.abs().max(1.0));
        }
    }

    #[test]
    fn aggregate_percentiles_match_convention() {
        let mk = |id: &str, repeat: usize, d_bias2: f64| {
            let mut rec = RunRecord {
                id: id.into(),
                model: "condseg".into(),
                train_size: 4,
                folds: 2,
                repeat,
                fold: 0,
                seed: 0,
                status: RunStatus::Done,
                error: None,
                final_loss: Some(0.1),
                checkpoint_path: None,
                rois: Vec::new(),
                patients: Vec::new(),
            };
            // One ROI and one patient per run; d_bias2 is shaped by offsets.
            rec.rois.push(RoiOutcome {
                patient: 0,
                pair_name: "p000_00".into(),
                roi_index: 0,
                kind: "gland".into(),
                adhoc: false,
                pred_x_mm: d_bias2.sqrt(),
                pred_y_mm: 0.0,
                fallback: false,
                gt_x_mm: 0.0,
                gt_y_mm: 0.0,
                error_mm: d_bias2.sqrt(),
            });
            rec.patients.push(PatientEval {
                patient: 0,
                tre_mm: d_bias2.sqrt(),
                rows: vec![],
                gland_dsc: vec![],
                adhoc_errors_mm: vec![],
            });
            rec
        };
        // Same ROI predicted at x = 1, 2, 3 across three repeats:
        // mean 2, bias^2 4, var 2/3.
        let ledger = vec![mk("a", 0, 1.0), mk("b", 1, 4.0), mk("c", 2, 9.0)];
        let rows = aggregate(&ledger).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!(r.repeat_count, 3);
        assert!((r.median_tre - 2.0).abs() < 1e-12);
        assert!((r.p25_tre - 1.5).abs() < 1e-12);
        assert!((r.p75_tre - 2.5).abs() < 1e-12);
        assert!((r.median_dbias2 - 4.0).abs() < 1e-12);
        assert!(r.adhoc_median_tre.is_nan());

        // Medians are permutation invariant.
        let ledger2 = vec![mk("c", 2, 9.0), mk("a", 0, 1.0), mk("b", 1, 4.0)];
        let rows2 = aggregate(&ledger2).unwrap();
        assert_eq!(rows[0].median_dbias2, rows2[0].median_dbias2);
        assert_eq!(rows[0].mean_tre, rows2[0].mean_tre);
    }

    #[test]
    fn tiny_plan_executes_resumes_and_covers_each_test_roi_once() {
        let mut cfg = SynthConfig::desk(4, 12);
        cfg.height = 16;
        cfg.width = 16;
        cfg.pairs_per_patient_min = 1;
        cfg.pairs_per_patient_max = 1;
        cfg.amplitude_px = 2.0;
        cfg.smoothness_px = 8.0;
        cfg.max_rois = 2;
        let ds = crate::synth::generate(&cfg).unwrap();
        let arch = ArchConfig { levels: 2, base_channels: 2, kernel: 3, height: 16, width: 16 };
        let plan = make_cv_plan(4, &[SizeSpec { train_size: 2, folds: 2 }], 2, 5).unwrap();
        assert_eq!(plan.runs.len(), 4);
        let tc = TrainConfig { steps: 2, batch: 2, ..TrainConfig::desk(2, 0) };
        let lc = LossConfig::default();
        let dir = tempfile::tempdir().unwrap();

        let records =
            run_plan(&plan, ModelKind::CondSeg, &ds, &arch, &tc, &lc, dir.path(), 1).unwrap();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| r.status == RunStatus::Done));

        // Every test ROI of a repeat appears in exactly one run's
        // predictions.
        for repeat in 0..2 {
            let mut seen: BTreeMap<(usize, String, usize), usize> = BTreeMap::new();
            for rec in records.iter().filter(|r| r.repeat == repeat) {
                for roi in &rec.rois {
                    *seen.entry((roi.patient, roi.pair_name.clone(), roi.roi_index)).or_default() +=
                        1;
                }
            }
            let total_rois: usize = ds.pairs.iter().map(|p| p.rois.len()).sum();
            assert_eq!(seen.len(), total_rois);
            assert!(seen.values().all(|c| *c == 1));
        }

        // Ledger files exist and a re-invocation does not retrain: the
        // mtimes of the run files stay put.
        let ledger = load_ledger(dir.path()).unwrap();
        assert_eq!(ledger.len(), 4);
        let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
        let runs_dir = dir.path().join("runs");
        let before: Vec<_> = std::fs::read_dir(&runs_dir)
            .unwrap()
            .map(|e| stamp(&e.unwrap().path()))
            .collect();
        let again =
            run_plan(&plan, ModelKind::CondSeg, &ds, &arch, &tc, &lc, dir.path(), 1).unwrap();
        assert_eq!(again.len(), 4);
        let after: Vec<_> = std::fs::read_dir(&runs_dir)
            .unwrap()
            .map(|e| stamp(&e.unwrap().path()))
            .collect();
        assert_eq!(before, after);

        // Aggregation produces one row for the single (model, size) group.
        let rows = aggregate(&ledger).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].size, 2);
        assert_eq!(rows[0].repeat_count, 2);
        assert!(rows[0].mean_tre.is_finite());
    }
}
