//! Procedural generator of patients, image pairs, ROI labels, and
//! ground-truth deformations with known correspondence.
//!
//! Multimodality is simulated by two intensity renderings of the same
//! anatomy; the fixed image is the pulled-back second rendering, so for
//! every generated pair `r_fix = warp_mask_binary(r_mov, gt_ddf)` holds by
//! construction. Optional topology changes composite a bright catheter-like
//! bar into the fixed image only, making voxel-level one-to-one
//! correspondence locally impossible while ROI ground truth stays exact.

use crate::grid::{Image, RoiMask};
use crate::io::{self, derive_seed, IoError};
use crate::warp::{self, Ddf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("image is constant; cannot normalize")]
    ConstantImage,
    #[error("gland mask vanished under the ground-truth deformation (pair {0})")]
    GlandLost(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("dataset manifest {path}: {message}")]
    BadManifest { path: String, message: String },
}

/// Everything the generator needs; a dataset is a pure function of this.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub schema: u32,
    pub height: usize,
    pub width: usize,
    /// Isotropic physical spacing, mm per pixel.
    pub spacing_mm: f64,
    pub patients: usize,
    pub pairs_per_patient_min: usize,
    pub pairs_per_patient_max: usize,
    /// Upper bound on non-held-out ROI pairs per image pair (gland included).
    pub max_rois: usize,
    /// Hard cap on the per-point displacement norm, pixels.
    pub amplitude_px: f64,
    /// Coarse-cell extent of the random field, pixels.
    pub smoothness_px: f64,
    /// 0 = both renderings identical, 1 = full appearance gap.
    pub modality_gap: f64,
    pub noise_sigma: f64,
    pub topology_change: bool,
    /// Probability that a pair receives a fixed-image-only structure.
    pub topology_rate: f64,
    /// Probability that a pair carries a calcification-like off-gland ROI.
    pub calcification_rate: f64,
    /// ROI kind held out from training by `mark_adhoc_rois`.
    pub hold_out_kind: String,
    pub seed: u64,
}

impl SynthConfig {
    pub fn desk(patients: usize, seed: u64) -> Self {
        SynthConfig {
            schema: 1,
            height: 64,
            width: 64,
            spacing_mm: 0.8,
            patients,
            pairs_per_patient_min: 2,
            pairs_per_patient_max: 2,
            max_rois: 4,
            amplitude_px: 6.0,
            smoothness_px: 16.0,
            modality_gap: 1.0,
            noise_sigma: 0.05,
            topology_change: false,
            topology_rate: 0.0,
            calcification_rate: 0.5,
            hold_out_kind: "calcification".to_string(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::InvalidConfig(m));
        if self.height < 8 || self.width < 8 {
            return err(format!("grid {}x{} too small", self.height, self.width));
        }
        if self.patients == 0 {
            return err("at least one patient".into());
        }
        if self.pairs_per_patient_min == 0 || self.pairs_per_patient_min > self.pairs_per_patient_max
        {
            return err("bad pairs-per-patient range".into());
        }
        if self.max_rois == 0 {
            return err("max_rois must be >= 1".into());
        }
        if self.amplitude_px < 0.0 {
            return err("amplitude must be >= 0".into());
        }
        if self.smoothness_px < 1.0 {
            return err("smoothness must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.topology_rate)
            || !(0.0..=1.0).contains(&self.calcification_rate)
            || !(0.0..=1.0).contains(&self.modality_gap)
        {
            return err("rates must lie in [0,1]".into());
        }
        if self.spacing_mm <= 0.0 {
            return err("spacing must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Gland,
    Landmark,
    Lesion,
    Calcification,
}

impl RoiKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoiKind::Gland => "gland",
            RoiKind::Landmark => "landmark",
            RoiKind::Lesion => "lesion",
            RoiKind::Calcification => "calcification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gland" => Some(RoiKind::Gland),
            "landmark" => Some(RoiKind::Landmark),
            "lesion" => Some(RoiKind::Lesion),
            "calcification" => Some(RoiKind::Calcification),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoiPair {
    pub kind: RoiKind,
    /// Held out from all training sampling; evaluated separately.
    pub adhoc: bool,
    pub mov: RoiMask,
    pub fix: RoiMask,
}

/// One (moving, fixed) pair with its ROI labels and ground-truth field.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub patient: usize,
    pub pair_index: usize,
    pub name: String,
    pub seed: u64,
    pub moving: Image,
    pub fixed: Image,
    pub rois: Vec<RoiPair>,
    pub gt_ddf: Ddf,
    pub topology_change: bool,
}

impl ImagePair {
    /// Indices of ROIs available to the training sampler.
    pub fn trainable_rois(&self) -> Vec<usize> {
        self.rois
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.adhoc)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn gland_index(&self) -> usize {
        self.rois
            .iter()
            .position(|r| r.kind == RoiKind::Gland)
            .expect("every pair carries a gland ROI")
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, f: f64) -> Ellipse {
        Ellipse { a: self.a * f, b: self.b * f, ..*self }
    }
}

/// Per-patient base anatomy; deterministic from its seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: usize,
    pub seed: u64,
    pub gland: Ellipse,
    pub zones: Vec<(Ellipse, usize)>,
    pub pairs: usize,
}

const TAG_PATIENT: u64 = 1;
const TAG_PAIR: u64 = 2;

/// Gland semi-axis range as a fraction of the smaller grid extent.
pub const GLAND_AX_FRAC: (f64, f64) = (0.16, 0.24);

pub fn gen_patient(cfg: &SynthConfig, index: usize) -> PatientRecord {
    let seed = derive_seed(cfg.seed, TAG_PATIENT, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.height.min(cfg.width) as f64;
    let gland = Ellipse {
        cy: cfg.height as f64 * rng.random_range(0.44..0.56),
        cx: cfg.width as f64 * rng.random_range(0.44..0.56),
        a: m * rng.random_range(GLAND_AX_FRAC.0..GLAND_AX_FRAC.1),
        b: m * rng.random_range(GLAND_AX_FRAC.0..GLAND_AX_FRAC.1),
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let n_zones = rng.random_range(2..=3usize);
    let zones = (0..n_zones)
        .map(|z| {
            let ell = Ellipse {
                cy: gland.cy + gland.b * rng.random_range(-0.45..0.45),
                cx: gland.cx + gland.a * rng.random_range(-0.45..0.45),
                a: gland.a * rng.random_range(0.2..0.45),
                b: gland.b * rng.random_range(0.2..0.45),
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            (ell, z)
        })
        .collect();
    let pairs = rng.random_range(cfg.pairs_per_patient_min..=cfg.pairs_per_patient_max);
    PatientRecord { id: index, seed, gland, zones, pairs }
}

/// Tissue intensity tables for the two simulated appearances.
struct Modality {
    background: f64,
    gland: f64,
    zones: [f64; 3],
    landmark: f64,
    lesion: f64,
    calcification: f64,
    grad_x: f64,
    grad_y: f64,
}

const MOD_A: Modality = Modality {
    background: 0.15,
    gland: 0.60,
    zones: [0.85, 0.40, 0.75],
    landmark: 0.95,
    lesion: 0.25,
    calcification: 1.05,
    grad_x: 0.10,
    grad_y: 0.05,
};

const MOD_B: Modality = Modality {
    background: 0.80,
    gland: 0.35,
    zones: [0.15, 0.60, 0.25],
    landmark: 0.05,
    lesion: 0.70,
    calcification: 1.10,
    grad_x: -0.08,
    grad_y: 0.12,
};

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

struct Spot {
    kind: RoiKind,
    discs: Vec<(f64, f64, f64)>, // (cy, cx, r)
}

impl Spot {
    fn contains(&self, y: f64, x: f64) -> bool {
        self.discs
            .iter()
            .any(|(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
    }

    fn mask(&self, h: usize, w: usize) -> RoiMask {
        let mut m = RoiMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if self.contains(y as f64, x as f64) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

fn render(cfg: &SynthConfig, patient: &PatientRecord, spots: &[Spot], second: bool) -> Image {
    let gap = if second { cfg.modality_gap } else { 0.0 };
    let pick = |a: f64, b: f64| lerp(a, b, gap);
    let bg = pick(MOD_A.background, MOD_B.background);
    let gl = pick(MOD_A.gland, MOD_B.gland);
    let gx = pick(MOD_A.grad_x, MOD_B.grad_x);
    let gy = pick(MOD_A.grad_y, MOD_B.grad_y);
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Image::zeros(h, w, cfg.spacing_mm);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let mut v = bg + gx * xf / w as f64 + gy * yf / h as f64;
            if patient.gland.contains(yf, xf) {
                v = gl;
                for (zone, zi) in &patient.zones {
                    if zone.contains(yf, xf) {
                        v = pick(MOD_A.zones[zi % 3], MOD_B.zones[zi % 3]);
                    }
                }
            }
            for spot in spots {
                if spot.contains(yf, xf) {
                    v = match spot.kind {
                        RoiKind::Landmark => pick(MOD_A.landmark, MOD_B.landmark),
                        RoiKind::Lesion => pick(MOD_A.lesion, MOD_B.lesion),
                        RoiKind::Calcification => pick(MOD_A.calcification, MOD_B.calcification),
                        RoiKind::Gland => unreachable!("gland is not a spot"),
                    };
                }
            }
            *img.at_mut(y, x) = v as f32;
        }
    }
    img
}

/// Zero-mean unit-variance normalization (population variance).
pub fn normalize(img: &Image) -> Result<Image, SynthError> {
    let n = img.data.len() as f64;
    let mean = img.data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = img.data.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(SynthError::ConstantImage);
    }
    let std = var.sqrt();
    let mut out = img.clone();
    for v in &mut out.data {
        *v = ((*v as f64 - mean) / std) as f32;
    }
    Ok(out)
}

/// Coarse i.i.d. Gaussian vectors (scale amplitude/3) linearly upsampled to
/// the full grid, then hard-clipped to a per-point norm of at most the
/// configured amplitude.
pub fn random_smooth_ddf(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Ddf {
    let (h, w) = (cfg.height, cfg.width);
    let mut ddf = Ddf::zeros(h, w, cfg.spacing_mm);
    if cfg.amplitude_px == 0.0 {
        return ddf;
    }
    let cell = cfg.smoothness_px.max(1.0);
    let ch = ((h as f64 / cell).ceil() as usize + 1).max(2);
    let cw = ((w as f64 / cell).ceil() as usize + 1).max(2);
    let normal = Normal::new(0.0, cfg.amplitude_px / 3.0).expect("valid sigma");
    let mut coarse = crate::diffcore::Tensor::<f32>::zeros(vec![2, ch, cw]);
    for v in coarse.data_mut() {
        *v = normal.sample(rng) as f32;
    }
    let fine = warp::resize_linear(&coarse, h, w);
    ddf.data.copy_from_slice(fine.data());
    let plane = h * w;
    let amp = cfg.amplitude_px as f32;
    for i in 0..plane {
        let ux = ddf.data[i];
        let uy = ddf.data[plane + i];
        let norm = (ux * ux + uy * uy).sqrt();
        if norm > amp {
            let s = amp / norm;
            ddf.data[i] = ux * s;
            ddf.data[plane + i] = uy * s;
        }
    }
    ddf
}

fn point_in_gland(patient: &PatientRecord, rng: &mut ChaCha8Rng, margin: f64) -> (f64, f64) {
    let g = patient.gland.scaled(margin);
    loop {
        let r = g.a.max(g.b);
        let y = g.cy + r * rng.random_range(-1.0..1.0);
        let x = g.cx + r * rng.random_range(-1.0..1.0);
        if g.contains(y, x) {
            return (y, x);
        }
    }
}

fn make_spot(kind: RoiKind, patient: &PatientRecord, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Spot {
    match kind {
        RoiKind::Landmark => {
            let (cy, cx) = point_in_gland(patient, rng, 0.8);
            let r = rng.random_range(1.5..3.0);
            Spot { kind, discs: vec![(cy, cx, r)] }
        }
        RoiKind::Lesion => {
            let (cy, cx) = point_in_gland(patient, rng, 0.7);
            let n = rng.random_range(2..=3usize);
            let discs = (0..n)
                .map(|_| {
                    (
                        cy + rng.random_range(-1.5..1.5),
                        cx + rng.random_range(-1.5..1.5),
                        rng.random_range(1.8..3.2),
                    )
                })
                .collect();
            Spot { kind, discs }
        }
        RoiKind::Calcification => {
            // Off-gland: just outside the boundary, a position no trainable
            // ROI kind ever occupies.
            let g = &patient.gland;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let scale = rng.random_range(1.12..1.35);
            let (s, c) = g.theta.sin_cos();
            let (u, v) = (g.a * scale * phi.cos(), g.b * scale * phi.sin());
            let cy = (g.cy + s * u + c * v).clamp(3.0, cfg.height as f64 - 4.0);
            let cx = (g.cx + c * u - s * v).clamp(3.0, cfg.width as f64 - 4.0);
            let r = rng.random_range(1.0..1.8);
            Spot { kind, discs: vec![(cy, cx, r)] }
        }
        RoiKind::Gland => unreachable!("gland is not a spot"),
    }
}

const PLACEMENT_RETRIES: usize = 8;

/// Place one spot ROI so that its warped label survives; bounded retries,
/// then the ROI is dropped with a log line.
fn place_spot_roi(
    kind: RoiKind,
    patient: &PatientRecord,
    cfg: &SynthConfig,
    gt_ddf: &Ddf,
    rng: &mut ChaCha8Rng,
    pair_name: &str,
) -> Option<(Spot, RoiMask, RoiMask)> {
    for _ in 0..PLACEMENT_RETRIES {
        let spot = make_spot(kind, patient, cfg, rng);
        let mov = spot.mask(cfg.height, cfg.width);
        if mov.is_empty() {
            continue;
        }
        let fix = warp::warp_mask_binary(&mov, gt_ddf).expect("finite generated field");
        if !fix.is_empty() {
            return Some((spot, mov, fix));
        }
    }
    log::warn!(
        "dropping {} ROI on {pair_name}: label empty after {PLACEMENT_RETRIES} placements",
        kind.as_str()
    );
    None
}

pub fn gen_pair(
    patient: &PatientRecord,
    pair_index: usize,
    cfg: &SynthConfig,
) -> Result<ImagePair, SynthError> {
    let seed = derive_seed(cfg.seed, TAG_PAIR, ((patient.id as u64) << 16) | pair_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("p{:03}_{:02}", patient.id, pair_index);
    let (h, w) = (cfg.height, cfg.width);

    let gt_ddf = random_smooth_ddf(cfg, &mut rng);

    // Gland mask first; it anchors the pair.
    let gland_mov = {
        let mut m = RoiMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if patient.gland.contains(y as f64, x as f64) {
                    m.set(y, x, true);
                }
            }
        }
        m
    };
    let gland_fix = warp::warp_mask_binary(&gland_mov, &gt_ddf).expect("finite generated field");
    if gland_fix.is_empty() {
        return Err(SynthError::GlandLost(name));
    }

    // Pair-specific structures: visible in both renderings, labelled.
    let extra = rng.random_range(0..cfg.max_rois);
    let mut spots: Vec<Spot> = Vec::new();
    let mut rois: Vec<RoiPair> =
        vec![RoiPair { kind: RoiKind::Gland, adhoc: false, mov: gland_mov, fix: gland_fix }];
    for i in 0..extra {
        let kind = if i % 2 == 0 { RoiKind::Landmark } else { RoiKind::Lesion };
        if let Some((spot, mov, fix)) = place_spot_roi(kind, patient, cfg, &gt_ddf, &mut rng, &name)
        {
            spots.push(spot);
            rois.push(RoiPair { kind, adhoc: false, mov, fix });
        }
    }
    if rng.random_range(0.0..1.0) < cfg.calcification_rate {
        if let Some((spot, mov, fix)) =
            place_spot_roi(RoiKind::Calcification, patient, cfg, &gt_ddf, &mut rng, &name)
        {
            spots.push(spot);
            rois.push(RoiPair { kind: RoiKind::Calcification, adhoc: false, mov, fix });
        }
    }

    // Moving image: first rendering plus acquisition noise.
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let mut moving = render(cfg, patient, &spots, false);
    for v in &mut moving.data {
        *v += noise.sample(&mut rng) as f32;
    }

    // Fixed image: second rendering pulled back through the ground-truth
    // field, then fixed-frame noise and the optional topology structure.
    let clean_b = render(cfg, patient, &spots, true);
    let mut fixed = warp::resample_image(&clean_b, &gt_ddf).expect("finite generated field");
    for v in &mut fixed.data {
        *v += noise.sample(&mut rng) as f32;
    }
    let topology_change = cfg.topology_change && rng.random_range(0.0..1.0) < cfg.topology_rate;
    if topology_change {
        // Catheter-like bright bar through the gland in the fixed frame only.
        let bar_x = patient.gland.cx + rng.random_range(-2.0..2.0);
        let half_w = rng.random_range(0.6..1.2);
        let y0 = (patient.gland.cy - patient.gland.b * 1.1).max(0.0) as usize;
        let y1 = ((patient.gland.cy + patient.gland.b * 1.1) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in 0..w {
                if (x as f64 - bar_x).abs() <= half_w {
                    *fixed.at_mut(y, x) = 1.3;
                }
            }
        }
    }

    let moving = normalize(&moving)?;
    let fixed = normalize(&fixed)?;

    Ok(ImagePair {
        patient: patient.id,
        pair_index,
        name,
        seed,
        moving,
        fixed,
        rois,
        gt_ddf,
        topology_change,
    })
}

/// In-memory dataset; `pairs` are ordered by (patient, pair_index).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SynthConfig,
    pub patients: Vec<PatientRecord>,
    pub pairs: Vec<ImagePair>,
}

impl Dataset {
    pub fn pair_ids_for_patients(&self, patients: &[usize]) -> Vec<usize> {
        self.pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| patients.contains(&p.patient))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Which ROI kind is held out of training and reported separately.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdhocRule {
    pub hold_out_kind: RoiKind,
}

/// Tag every ROI of the held-out kind as ad-hoc. Tagged ROIs never reach the
/// training sampler; the construction invariant is untouched.
pub fn mark_adhoc_rois(mut dataset: Dataset, rule: &AdhocRule) -> Dataset {
    for pair in &mut dataset.pairs {
        for roi in &mut pair.rois {
            if roi.kind == rule.hold_out_kind {
                roi.adhoc = true;
            }
        }
    }
    dataset
}

/// Generate the full dataset in memory (patients, pairs, ad-hoc tags).
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let patients: Vec<PatientRecord> = (0..cfg.patients).map(|i| gen_patient(cfg, i)).collect();
    let mut pairs = Vec::new();
    for patient in &patients {
        for k in 0..patient.pairs {
            pairs.push(gen_pair(patient, k, cfg)?);
        }
    }
    let mut ds = Dataset { config: cfg.clone(), patients, pairs };
    if let Some(kind) = RoiKind::parse(&cfg.hold_out_kind) {
        ds = mark_adhoc_rois(ds, &AdhocRule { hold_out_kind: kind });
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json plus one raw little-endian f32 file per
// array (row-major, y-major; masks stored as 0.0/1.0).

pub const DATASET_MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_SCHEMA: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoiMeta {
    pub kind: String,
    pub adhoc: bool,
    pub mov_file: String,
    pub fix_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMeta {
    pub patient: usize,
    pub pair_index: usize,
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    pub topology_change: bool,
    pub moving_file: String,
    pub fixed_file: String,
    pub ddf_file: String,
    pub rois: Vec<RoiMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientMeta {
    pub id: usize,
    pub seed: u64,
    pub pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub config: SynthConfig,
    pub patients: Vec<PatientMeta>,
    pub pairs: Vec<PairMeta>,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest, SynthError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| IoError::File { path: dir.display().to_string(), source: e })?;
    let mut pair_metas = Vec::with_capacity(dataset.pairs.len());
    for pair in &dataset.pairs {
        let base = &pair.name;
        let moving_file = format!("{base}_mov.f32");
        let fixed_file = format!("{base}_fix.f32");
        let ddf_file = format!("{base}_ddf.f32");
        io::write_f32(&dir.join(&moving_file), &pair.moving.data)?;
        io::write_f32(&dir.join(&fixed_file), &pair.fixed.data)?;
        io::write_f32(&dir.join(&ddf_file), &pair.gt_ddf.data)?;
        let mut roi_metas = Vec::with_capacity(pair.rois.len());
        for (i, roi) in pair.rois.iter().enumerate() {
            let mov_file = format!("{base}_roi{i}_mov.f32");
            let fix_file = format!("{base}_roi{i}_fix.f32");
            io::write_f32(&dir.join(&mov_file), &roi.mov.to_f32_vec())?;
            io::write_f32(&dir.join(&fix_file), &roi.fix.to_f32_vec())?;
            roi_metas.push(RoiMeta {
                kind: roi.kind.as_str().to_string(),
                adhoc: roi.adhoc,
                mov_file,
                fix_file,
            });
        }
        pair_metas.push(PairMeta {
            patient: pair.patient,
            pair_index: pair.pair_index,
            name: pair.name.clone(),
            seed: pair.seed,
            height: pair.moving.h,
            width: pair.moving.w,
            spacing_mm: pair.moving.spacing_mm,
            topology_change: pair.topology_change,
            moving_file,
            fixed_file,
            ddf_file,
            rois: roi_metas,
        });
    }
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA,
        config: dataset.config.clone(),
        patients: dataset
            .patients
            .iter()
            .map(|p| PatientMeta { id: p.id, seed: p.seed, pairs: p.pairs })
            .collect(),
        pairs: pair_metas,
    };
    io::write_json(&dir.join(DATASET_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Generate and persist; the one-call entry point used by the CLI.
pub fn gen_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Dataset, SynthError> {
    let ds = generate(cfg)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest_path = dir.join(DATASET_MANIFEST_FILE);
    let manifest: DatasetManifest = io::read_json(&manifest_path)?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(SynthError::BadManifest {
            path: manifest_path.display().to_string(),
            message: format!("unsupported schema {}", manifest.schema),
        });
    }
    let cfg = manifest.config.clone();
    let patients: Vec<PatientRecord> = (0..cfg.patients).map(|i| gen_patient(&cfg, i)).collect();
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for meta in &manifest.pairs {
        let n = meta.height * meta.width;
        let moving = Image {
            h: meta.height,
            w: meta.width,
            spacing_mm: meta.spacing_mm,
            data: io::read_f32(&dir.join(&meta.moving_file), n)?,
        };
        let fixed = Image {
            h: meta.height,
            w: meta.width,
            spacing_mm: meta.spacing_mm,
            data: io::read_f32(&dir.join(&meta.fixed_file), n)?,
        };
        let gt_ddf = Ddf {
            h: meta.height,
            w: meta.width,
            spacing_mm: meta.spacing_mm,
            data: io::read_f32(&dir.join(&meta.ddf_file), 2 * n)?,
        };
        let mut rois = Vec::with_capacity(meta.rois.len());
        for r in &meta.rois {
            let kind = RoiKind::parse(&r.kind).ok_or_else(|| SynthError::BadManifest {
                path: manifest_path.display().to_string(),
                message: format!("unknown roi kind {}", r.kind),
            })?;
            rois.push(RoiPair {
                kind,
                adhoc: r.adhoc,
                mov: RoiMask::from_f32(
                    meta.height,
                    meta.width,
                    &io::read_f32(&dir.join(&r.mov_file), n)?,
                ),
                fix: RoiMask::from_f32(
                    meta.height,
                    meta.width,
                    &io::read_f32(&dir.join(&r.fix_file), n)?,
                ),
            });
        }
        pairs.push(ImagePair {
            patient: meta.patient,
            pair_index: meta.pair_index,
            name: meta.name.clone(),
            seed: meta.seed,
            moving,
            fixed,
            rois,
            gt_ddf,
            topology_change: meta.topology_change,
        });
    }
    Ok(Dataset { config: cfg, patients, pairs })
}
