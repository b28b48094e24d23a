//! Builders for the two compared networks. Both share one fully
//! convolutional encoder-decoder backbone; they differ only in input
//! channels (3 vs 2) and head (single sigmoid channel vs 2 linear
//! displacement channels, the latter zero-initialized so the untrained
//! network is the identity transform).

use crate::diffcore::{Graph, GraphBuilder, InitKind, NodeId, Params, Tensor};
use crate::grid::{Image, RoiMask};
use crate::io::{self, IoError};
use crate::warp::{self, Ddf, ProbMap};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("input grid {0}x{1} does not match network grid {2}x{3}")]
    GridMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint parameter blob holds {got} values, graph needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("graph evaluation failed: {0}")]
    Eval(#[from] crate::diffcore::DiffError),
}

/// Encoder-decoder shape shared by both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Resolution levels; channels double and extents halve per level.
    pub levels: usize,
    /// Channels at the finest level.
    pub base_channels: usize,
    /// Odd square kernel extent.
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ArchConfig {
    /// Small default that trains in minutes on one CPU core.
    pub fn desk(height: usize, width: usize) -> Self {
        ArchConfig { levels: 3, base_channels: 8, kernel: 3, height, width }
    }

    /// 32 initial channels; slow at desk scale but available as a preset.
    pub fn paper_preset(height: usize, width: usize) -> Self {
        ArchConfig { levels: 3, base_channels: 32, kernel: 3, height, width }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.levels < 2 {
            return err(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.base_channels < 2 {
            return err(format!("base_channels must be >= 2, got {}", self.base_channels));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return err(format!("kernel must be odd, got {}", self.kernel));
        }
        let div = 1usize << (self.levels - 1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return err(format!(
                "grid {}x{} must be divisible by 2^(levels-1) = {div}",
                self.height, self.width
            ));
        }
        if self.height / div < 3 || self.width / div < 3 {
            return err(format!(
                "coarsest grid {}x{} too small; need >= 3 per dim",
                self.height / div,
                self.width / div
            ));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    CondSeg,
    DdfReg,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::CondSeg => "condseg",
            ModelKind::DdfReg => "ddfreg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "condseg" => Some(ModelKind::CondSeg),
            "ddfreg" => Some(ModelKind::DdfReg),
            _ => None,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            ModelKind::CondSeg => 3,
            ModelKind::DdfReg => 2,
        }
    }
}

/// Conditional segmentation network: inputs (fixed image, moving image,
/// moving ROI), one sigmoid output channel on the fixed grid.
#[derive(Clone, Debug)]
pub struct CondSegNet {
    pub cfg: ArchConfig,
    pub graph: Graph,
}

/// Registration network: inputs (fixed image, moving image), two linear
/// output channels interpreted as a displacement field in pixels.
#[derive(Clone, Debug)]
pub struct RegNet {
    pub cfg: ArchConfig,
    pub graph: Graph,
}

/// Network nodes appended into a caller-owned builder, so losses can be
/// stacked on top of the same parameter table.
pub struct NetNodes {
    /// One input node per channel group: [fixed, moving] (+ [roi] for condseg).
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

/// Append the full network for `kind` to `b`. Image inputs are separate
/// single-channel nodes concatenated in the input layer, which keeps the
/// channel layout contract explicit.
pub fn append_net(b: &mut GraphBuilder, cfg: &ArchConfig, kind: ModelKind) -> NetNodes {
    let (h, w) = (cfg.height, cfg.width);
    let fixed = b.input(vec![1, h, w]);
    let moving = b.input(vec![1, h, w]);
    let mut inputs = vec![fixed, moving];
    let mut x = b.concat(fixed, moving);
    if kind == ModelKind::CondSeg {
        let roi = b.input(vec![1, h, w]);
        inputs.push(roi);
        x = b.concat(x, roi);
    }
    let output = append_backbone(b, cfg, kind, x);
    NetNodes { inputs, output }
}

fn conv_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) -> NodeId {
    let w = b.param(&format!("{name}.w"), vec![c_out, c_in, kernel, kernel], InitKind::FanInUniform);
    let bias = b.param(&format!("{name}.b"), vec![c_out], InitKind::Zeros);
    let y = b.conv2d(x, w, stride);
    let y = b.bias_add(y, bias);
    b.relu(y)
}

fn append_backbone(b: &mut GraphBuilder, cfg: &ArchConfig, kind: ModelKind, input: NodeId) -> NodeId {
    let levels = cfg.levels;
    let k = cfg.kernel;

    // Encoder: one stride-1 block at full resolution, then a stride-2
    // downsampling block plus a stride-1 block per deeper level.
    let mut skips: Vec<NodeId> = Vec::with_capacity(levels);
    let mut x = conv_block(b, "enc0", input, kind.input_channels(), cfg.channels_at(0), k, 1);
    skips.push(x);
    for level in 1..levels {
        let c_prev = cfg.channels_at(level - 1);
        let c = cfg.channels_at(level);
        x = conv_block(b, &format!("down{level}"), x, c_prev, c, k, 2);
        x = conv_block(b, &format!("enc{level}"), x, c, c, k, 1);
        skips.push(x);
    }

    // Decoder: nearest-neighbour 2x upsampling, skip concatenation, conv.
    for level in (0..levels - 1).rev() {
        let c_deep = cfg.channels_at(level + 1);
        let c = cfg.channels_at(level);
        let up = b.upsample2x(x);
        let cat = b.concat(up, skips[level]);
        x = conv_block(b, &format!("dec{level}"), cat, c_deep + c, c, k, 1);
    }

    // Head: 1x1 conv. CondSeg squashes through a sigmoid; DdfReg stays
    // linear and starts at zero so the initial transform is the identity.
    match kind {
        ModelKind::CondSeg => {
            let w = b.param("head.w", vec![1, cfg.channels_at(0), 1, 1], InitKind::FanInUniform);
            let bias = b.param("head.b", vec![1], InitKind::Zeros);
            let y = b.conv2d(x, w, 1);
            let y = b.bias_add(y, bias);
            b.sigmoid(y)
        }
        ModelKind::DdfReg => {
            let w = b.param("head.w", vec![2, cfg.channels_at(0), 1, 1], InitKind::Zeros);
            let bias = b.param("head.b", vec![2], InitKind::Zeros);
            let y = b.conv2d(x, w, 1);
            b.bias_add(y, bias)
        }
    }
}

pub fn build_condseg(cfg: &ArchConfig) -> Result<CondSegNet, ModelError> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let net = append_net(&mut b, cfg, ModelKind::CondSeg);
    Ok(CondSegNet { cfg: *cfg, graph: b.finish(vec![net.output]) })
}

pub fn build_ddfreg(cfg: &ArchConfig) -> Result<RegNet, ModelError> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let net = append_net(&mut b, cfg, ModelKind::DdfReg);
    Ok(RegNet { cfg: *cfg, graph: b.finish(vec![net.output]) })
}

/// Build just the graph for `kind` (used where only the parameter table or
/// raw graph is needed).
pub fn build_graph(cfg: &ArchConfig, kind: ModelKind) -> Result<Graph, ModelError> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let net = append_net(&mut b, cfg, kind);
    Ok(b.finish(vec![net.output]))
}

/// Assemble the three network input tensors for one conditional-segmentation
/// query. The moving ROI is linearly resampled to the fixed grid and fed as
/// a soft channel, not re-thresholded.
pub fn condseg_inputs(
    cfg: &ArchConfig,
    fixed: &Image,
    moving: &Image,
    moving_roi: &RoiMask,
) -> Result<Vec<Tensor<f32>>, ModelError> {
    if fixed.h != cfg.height || fixed.w != cfg.width {
        return Err(ModelError::GridMismatch(fixed.h, fixed.w, cfg.height, cfg.width));
    }
    let roi = warp::resize_mask_soft(moving_roi, cfg.height, cfg.width);
    Ok(vec![fixed.to_tensor(), moving.to_tensor(), roi])
}

/// Per-voxel foreground probability for the ROI propagated onto the fixed
/// grid.
pub fn predict_roi(
    net: &CondSegNet,
    params: &Params<f32>,
    fixed: &Image,
    moving: &Image,
    moving_roi: &RoiMask,
) -> Result<ProbMap, ModelError> {
    let inputs = condseg_inputs(&net.cfg, fixed, moving, moving_roi)?;
    let out = net.graph.forward(params, &inputs)?;
    Ok(ProbMap::from_tensor(&out[0]))
}

/// Displacement field predicted for one image pair, in pixels of the fixed
/// grid.
pub fn predict_ddf(
    net: &RegNet,
    params: &Params<f32>,
    fixed: &Image,
    moving: &Image,
) -> Result<Ddf, ModelError> {
    if fixed.h != net.cfg.height || fixed.w != net.cfg.width {
        return Err(ModelError::GridMismatch(fixed.h, fixed.w, net.cfg.height, net.cfg.width));
    }
    let out = net.graph.forward(params, &[fixed.to_tensor(), moving.to_tensor()])?;
    Ok(Ddf::from_tensor(&out[0], fixed.spacing_mm))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Checkpoint manifest; the parameter blob sits next to it as raw
/// little-endian f32, byte length exactly 4x the parameter count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema: u32,
    pub model: String,
    pub arch: ArchConfig,
    pub seed: u64,
    pub steps: u64,
    pub param_count: usize,
    pub segments: Vec<SegmentMeta>,
}

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const PARAMS_FILE: &str = "params.f32";
pub const CHECKPOINT_MANIFEST_FILE: &str = "checkpoint.json";

pub fn save_checkpoint(
    dir: &Path,
    kind: ModelKind,
    arch: &ArchConfig,
    graph: &Graph,
    params: &Params<f32>,
    steps: u64,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| IoError::File { path: dir.display().to_string(), source: e })?;
    let manifest = CheckpointManifest {
        schema: CHECKPOINT_SCHEMA,
        model: kind.as_str().to_string(),
        arch: *arch,
        seed: params.seed,
        steps,
        param_count: params.len(),
        segments: graph
            .segments()
            .segments()
            .iter()
            .map(|s| SegmentMeta { name: s.name.clone(), offset: s.offset, len: s.len })
            .collect(),
    };
    io::write_json(&dir.join(CHECKPOINT_MANIFEST_FILE), &manifest)?;
    io::write_f32(&dir.join(PARAMS_FILE), &params.values)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Params<f32>), ModelError> {
    let manifest: CheckpointManifest = io::read_json(&dir.join(CHECKPOINT_MANIFEST_FILE))?;
    let kind = ModelKind::parse(&manifest.model)
        .ok_or_else(|| ModelError::InvalidConfig(format!("unknown model kind {}", manifest.model)))?;
    let graph = build_graph(&manifest.arch, kind)?;
    if graph.param_len() != manifest.param_count {
        return Err(ModelError::ParamCount {
            expected: graph.param_len(),
            got: manifest.param_count,
        });
    }
    let values = io::read_f32(&dir.join(PARAMS_FILE), manifest.param_count)?;
    let params = Params { values, seed: manifest.seed };
    Ok((manifest, params))
}
