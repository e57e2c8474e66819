//! The segment-proposal network: strided conv backbone, anchor heads,
//! proposal filtering, RoIAlign, and the second-stage heads, plus SGD
//! training and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::anchors::{
    assign_labels, assign_targets, build_anchor_grid, sample_minibatch, AnchorGrid, FrameTurn, Interval, Label, BG_IOU,
    FG_IOU,
};
use crate::features::{chunk_recording, FeatureChunk};
use crate::io::{self, IoError};
use crate::losses::{
    binary_cls_loss_var, smooth_l1_loss_var, speaker_cls_loss_var, LossBreakdown, LossVars, ALPHA_ADAPT, ALPHA_TRAIN,
};
use crate::pipeline::{postprocess, Annotation, PostprocessConfig, PostprocessError, PostprocessOutput};
use crate::proposals::{decode, encode, filter_indices, roi_align_var, CoordDelta, ProposalSet, RoiAlignConfig};
use crate::tensor::{Conv2dSpec, Graph, Result as TResult, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("non-finite loss at step {step}: term {term} = {value}; breakdown {dump}")]
    NonFiniteLoss {
        step: u64,
        term: String,
        value: f64,
        dump: String,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown speaker {0:?} in training annotation")]
    UnknownSpeaker(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture and training hyper-parameters. Serialized as sorted
/// `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub freq_bins: usize,
    pub frames: usize,
    /// One stride-2 3×3 conv block per entry.
    pub channels: Vec<usize>,
    /// Residual 1×3 time convs on the feature map, one per dilation.
    pub context_dilations: Vec<usize>,
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<usize>,
    pub roi_bins: usize,
    pub roi_samples: usize,
    pub embedding_dim: usize,
    /// Training speaker inventory; its order fixes the speaker head rows.
    pub speakers: Vec<String>,
    pub pre_nms_top_n: usize,
    pub nms_threshold: f64,
    pub train_post_nms: usize,
    pub eval_post_nms: usize,
    pub rpn_batch: usize,
    pub rcnn_batch: usize,
    pub fg_fraction: f64,
    /// Per-coordinate (dx, dw) scale of the regression head outputs; targets
    /// are divided by it before the loss.
    pub rpn_reg_std: Vec<f64>,
    pub rcnn_reg_std: Vec<f64>,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Steps after which the learning rate is multiplied by `lr_decay`.
    pub decay_steps: Vec<u64>,
    pub lr_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            freq_bins: 32,
            frames: 1000,
            channels: vec![8, 16, 32, 64],
            context_dilations: vec![1, 2, 4, 8],
            rpn_channels: 64,
            anchor_sizes: crate::anchors::DEFAULT_ANCHOR_SIZES.to_vec(),
            roi_bins: 7,
            roi_samples: 4,
            embedding_dim: 128,
            speakers: Vec::new(),
            pre_nms_top_n: 300,
            nms_threshold: 0.7,
            train_post_nms: 100,
            eval_post_nms: 50,
            rpn_batch: 128,
            rcnn_batch: 64,
            fg_fraction: 0.5,
            rpn_reg_std: vec![0.1, 0.2],
            rcnn_reg_std: vec![0.1, 0.2],
            alpha: ALPHA_TRAIN,
            lr: 0.01,
            momentum: 0.9,
            decay_steps: vec![20_000, 40_000],
            lr_decay: 0.1,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl ModelConfig {
    /// Geometry of the reference setup: 257 STFT bins by 1000 frames.
    pub fn reference_geometry() -> Self {
        ModelConfig {
            freq_bins: 257,
            ..Default::default()
        }
    }

    /// A few hundred parameters, for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            freq_bins: 4,
            frames: 64,
            channels: vec![2, 3],
            context_dilations: vec![1],
            rpn_channels: 3,
            anchor_sizes: vec![1, 2, 4],
            roi_bins: 2,
            roi_samples: 1,
            embedding_dim: 5,
            speakers: vec!["a".into(), "b".into(), "c".into()],
            pre_nms_top_n: 40,
            train_post_nms: 10,
            eval_post_nms: 5,
            rpn_batch: 16,
            rcnn_batch: 8,
            ..Default::default()
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Frames per feature-map timestep.
    pub fn frames_per_step(&self) -> usize {
        1 << self.channels.len()
    }

    fn reduce(mut n: usize, blocks: usize) -> usize {
        for _ in 0..blocks {
            n = (n + 1) / 2;
        }
        n
    }

    pub fn timesteps(&self) -> usize {
        Self::reduce(self.frames, self.channels.len())
    }

    pub fn freq_cells(&self) -> usize {
        Self::reduce(self.freq_bins, self.channels.len())
    }

    pub fn map_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&1)
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        build_anchor_grid(self.timesteps(), &self.anchor_sizes, self.frames_per_step())
    }

    pub fn roi_config(&self) -> RoiAlignConfig {
        RoiAlignConfig {
            bins_per_axis: self.roi_bins,
            samples_per_bin: self.roi_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.freq_bins == 0 || self.frames == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return bad("input geometry and channel widths must be positive".into());
        }
        if self.rpn_channels == 0 || self.embedding_dim == 0 || self.roi_bins == 0 {
            return bad("rpn_channels, embedding_dim and roi_bins must be positive".into());
        }
        let s = (self.roi_samples as f64).sqrt().round() as usize;
        if s == 0 || s * s != self.roi_samples {
            return bad(format!("roi_samples {} is not a perfect square", self.roi_samples));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.contains(&0) {
            return bad("anchor sizes must be positive".into());
        }
        if self.speakers.is_empty() {
            return bad("the speaker inventory is empty".into());
        }
        if self.timesteps() * self.frames_per_step() < self.frames {
            return bad(format!(
                "{} timesteps of {} frames do not cover {} frames",
                self.timesteps(),
                self.frames_per_step(),
                self.frames
            ));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.nms_threshold) {
            return bad("fg_fraction and nms_threshold must lie in [0, 1]".into());
        }
        if self.eval_post_nms == 0 || self.train_post_nms == 0 || self.rpn_batch == 0 || self.rcnn_batch == 0 {
            return bad("proposal and batch counts must be positive".into());
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.alpha >= 0.0 && self.grad_clip >= 0.0) {
            return bad("lr, momentum, alpha and grad_clip must be non-negative".into());
        }
        for std in [&self.rpn_reg_std, &self.rcnn_reg_std] {
            if std.len() != 2 || !std.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return bad(format!("regression scales need two positive values, got {std:?}"));
            }
        }
        Ok(())
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("freq_bins", self.freq_bins.to_string()),
            ("frames", self.frames.to_string()),
            ("channels", list(&self.channels)),
            ("context_dilations", list(&self.context_dilations)),
            ("rpn_channels", self.rpn_channels.to_string()),
            ("anchor_sizes", list(&self.anchor_sizes)),
            ("roi_bins", self.roi_bins.to_string()),
            ("roi_samples", self.roi_samples.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("speakers", self.speakers.join(",")),
            ("pre_nms_top_n", self.pre_nms_top_n.to_string()),
            ("nms_threshold", self.nms_threshold.to_string()),
            ("train_post_nms", self.train_post_nms.to_string()),
            ("eval_post_nms", self.eval_post_nms.to_string()),
            ("rpn_batch", self.rpn_batch.to_string()),
            ("rcnn_batch", self.rcnn_batch.to_string()),
            ("fg_fraction", self.fg_fraction.to_string()),
            ("rpn_reg_std", list(&self.rpn_reg_std)),
            ("rcnn_reg_std", list(&self.rcnn_reg_std)),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("decay_steps", list(&self.decay_steps)),
            ("lr_decay", self.lr_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Canonical key-sorted text; floats use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `key = value` lines over the defaults. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|m| ModelError::Config(format!("line {}: {m}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        fn pl<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            parse_list(v).ok_or_else(|| format!("bad list {v:?} for {key}"))
        }
        match key {
            "freq_bins" => self.freq_bins = p(key, value)?,
            "frames" => self.frames = p(key, value)?,
            "channels" => self.channels = pl(key, value)?,
            "context_dilations" => self.context_dilations = pl(key, value)?,
            "rpn_channels" => self.rpn_channels = p(key, value)?,
            "anchor_sizes" => self.anchor_sizes = pl(key, value)?,
            "roi_bins" => self.roi_bins = p(key, value)?,
            "roi_samples" => self.roi_samples = p(key, value)?,
            "embedding_dim" => self.embedding_dim = p(key, value)?,
            "speakers" => self.speakers = pl(key, value)?,
            "pre_nms_top_n" => self.pre_nms_top_n = p(key, value)?,
            "nms_threshold" => self.nms_threshold = p(key, value)?,
            "train_post_nms" => self.train_post_nms = p(key, value)?,
            "eval_post_nms" => self.eval_post_nms = p(key, value)?,
            "rpn_batch" => self.rpn_batch = p(key, value)?,
            "rcnn_batch" => self.rcnn_batch = p(key, value)?,
            "fg_fraction" => self.fg_fraction = p(key, value)?,
            "rpn_reg_std" => self.rpn_reg_std = pl(key, value)?,
            "rcnn_reg_std" => self.rcnn_reg_std = pl(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "momentum" => self.momentum = p(key, value)?,
            "decay_steps" => self.decay_steps = pl(key, value)?,
            "lr_decay" => self.lr_decay = p(key, value)?,
            "grad_clip" => self.grad_clip = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Fields that fix parameter shapes, excluding the speaker head.
    fn geometry(&self) -> String {
        let e = self.entries();
        [
            "freq_bins",
            "frames",
            "channels",
            "context_dilations",
            "rpn_channels",
            "anchor_sizes",
            "roi_bins",
            "embedding_dim",
        ]
        .iter()
        .map(|k| format!("{k}={}", e[k]))
        .collect::<Vec<_>>()
        .join(" ")
    }

    /// Learning rate after `step` updates under the step-decay schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = self.decay_steps.iter().filter(|&&d| step >= d).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    He,
    /// He scaled down, for residual branches.
    Residual,
    /// Unit gain: `1/sqrt(fan_in)`.
    Lecun,
    Small,
    Zero,
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        out.push((format!("backbone.{i}.weight"), vec![c, c_in, 3, 3], Init::He));
        out.push((format!("backbone.{i}.bias"), vec![c], Init::Zero));
        c_in = c;
    }
    let c = cfg.map_channels();
    for i in 0..cfg.context_dilations.len() {
        out.push((format!("context.{i}.weight"), vec![c, c, 1, 3], Init::Residual));
        out.push((format!("context.{i}.bias"), vec![c], Init::Zero));
    }
    let (r, a) = (cfg.rpn_channels, cfg.anchor_sizes.len());
    out.push(("rpn.conv.weight".into(), vec![r, c, 3, 3], Init::He));
    out.push(("rpn.conv.bias".into(), vec![r], Init::Zero));
    out.push(("rpn.cls.weight".into(), vec![a, r], Init::Small));
    out.push(("rpn.cls.bias".into(), vec![a], Init::Zero));
    out.push(("rpn.reg.weight".into(), vec![2 * a, r], Init::Small));
    out.push(("rpn.reg.bias".into(), vec![2 * a], Init::Zero));
    let (e, n) = (cfg.embedding_dim, cfg.roi_bins);
    out.push(("rcnn.fc.weight".into(), vec![e, c * n * n], Init::Lecun));
    out.push(("rcnn.fc.bias".into(), vec![e], Init::Zero));
    out.push(("rcnn.emb.weight".into(), vec![e, c * n * n], Init::Lecun));
    out.push(("rcnn.emb.bias".into(), vec![e], Init::Zero));
    out.push(("rcnn.cls.weight".into(), vec![1, e], Init::Small));
    out.push(("rcnn.cls.bias".into(), vec![1], Init::Zero));
    out.push(("rcnn.reg.weight".into(), vec![2, e], Init::Small));
    out.push(("rcnn.reg.bias".into(), vec![2], Init::Zero));
    out.push(("rcnn.spk.weight".into(), vec![cfg.num_speakers(), e], Init::Small));
    out.push(("rcnn.spk.bias".into(), vec![cfg.num_speakers()], Init::Zero));
    out
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[1..].iter().product::<usize>() as f64;
    let std = match init {
        Init::Zero => return Tensor::zeros(shape),
        Init::Small => 0.01,
        Init::He => (2.0 / fan_in).sqrt(),
        Init::Residual => 0.1 * (2.0 / fan_in).sqrt(),
        Init::Lecun => (1.0 / fan_in).sqrt(),
    };
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Parameters by name in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    fn get(&self, name: &str) -> Var {
        self.0[name]
    }
}

// ---------------------------------------------------------------------------
// model

/// What the network emits for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPrediction {
    /// Refined, clipped intervals in chunk frames with second-stage fg
    /// probabilities and embeddings; `chunk_origin` is the start frame.
    pub proposals: ProposalSet,
}

/// Frozen targets for one chunk: which anchors and regions to score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingPlan {
    pub rpn_samples: Vec<usize>,
    pub rpn_labels: Vec<f64>,
    pub rpn_fg: Vec<usize>,
    pub rpn_fg_targets: Vec<CoordDelta>,
    /// Second-stage regions in chunk frames.
    pub rois: Vec<Interval>,
    pub roi_labels: Vec<f64>,
    /// Positions in `rois` that are fg.
    pub roi_fg: Vec<usize>,
    pub roi_fg_targets: Vec<CoordDelta>,
    pub roi_fg_speakers: Vec<usize>,
}

struct Trunk {
    map: Var,
    /// `[anchors, 1]` fg probabilities.
    rpn_probs: Var,
    /// `[anchors, 2]` deltas.
    rpn_deltas: Var,
}

struct Heads {
    embedding: Var,
    cls: Var,
    reg: Var,
    spk: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    grid: AnchorGrid,
}

/// Anchor deltas beyond this log-ratio would exceed the chunk by far.
const MAX_DW: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for (name, shape, init) in param_layout(&config) {
            tensors.push(init_tensor(&shape, init, &mut rng));
            names.push(name);
        }
        let grid = config.anchor_grid();
        Ok(Model {
            config,
            params: Params { names, tensors },
            grid,
        })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.tensors.len() {
            return Err(ModelError::Geometry(format!(
                "{} parameter tensors for a layout of {}",
                params.tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Geometry(format!(
                    "{n} {:?} where {name} {shape:?} expected",
                    t.shape()
                )));
            }
        }
        let grid = config.anchor_grid();
        Ok(Model { config, params, grid })
    }

    pub fn anchor_grid(&self) -> &AnchorGrid {
        &self.grid
    }

    fn bind(&self, g: &mut Graph, tensors: &[Tensor], trainable: bool) -> ParamVars {
        let map = self
            .params
            .names
            .iter()
            .zip(tensors)
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        ParamVars(map)
    }

    fn check_chunk(&self, chunk: &FeatureChunk) -> Result<()> {
        let want = [self.config.freq_bins, self.config.frames];
        if chunk.matrix.shape() != want {
            return Err(ModelError::Geometry(format!(
                "chunk {:?} but the model expects {want:?}",
                chunk.matrix.shape()
            )));
        }
        Ok(())
    }

    fn trunk(&self, g: &mut Graph, p: &ParamVars, input: Var) -> TResult<Trunk> {
        let cfg = &self.config;
        let mut x = g.reshape(input, &[1, cfg.freq_bins, cfg.frames])?;
        for i in 0..cfg.channels.len() {
            let w = p.get(&format!("backbone.{i}.weight"));
            let b = p.get(&format!("backbone.{i}.bias"));
            x = g.conv2d(x, w, Some(b), Conv2dSpec::new(2, 1))?;
            x = g.relu(x)?;
        }
        for (i, &d) in cfg.context_dilations.iter().enumerate() {
            let w = p.get(&format!("context.{i}.weight"));
            let b = p.get(&format!("context.{i}.bias"));
            let spec = Conv2dSpec {
                stride: (1, 1),
                padding: (0, d),
                dilation: (1, d),
            };
            let y = g.conv2d(x, w, Some(b), spec)?;
            let y = g.relu(y)?;
            x = g.add(x, y)?;
        }
        let map = x;
        let h = g.conv2d(
            map,
            p.get("rpn.conv.weight"),
            Some(p.get("rpn.conv.bias")),
            Conv2dSpec::new(1, 1),
        )?;
        let h = g.relu(h)?;
        let h = g.mean_pool(h, 1)?;
        let h = g.transpose(h)?;
        let cls = g.linear(h, p.get("rpn.cls.weight"), Some(p.get("rpn.cls.bias")))?;
        let cls = g.sigmoid(cls)?;
        let n = self.grid.len();
        let rpn_probs = g.reshape(cls, &[n, 1])?;
        let reg = g.linear(h, p.get("rpn.reg.weight"), Some(p.get("rpn.reg.bias")))?;
        let rpn_deltas = g.reshape(reg, &[n, 2])?;
        Ok(Trunk {
            map,
            rpn_probs,
            rpn_deltas,
        })
    }

    fn heads(&self, g: &mut Graph, p: &ParamVars, map: Var, rois: &[Interval]) -> TResult<Heads> {
        let cfg = &self.config;
        let fps = cfg.frames_per_step() as f64;
        let steps: Vec<Interval> = rois.iter().map(|r| r.scaled(1.0 / fps)).collect();
        let pooled = roi_align_var(g, map, &steps, &cfg.roi_config())?;
        let width = cfg.map_channels() * cfg.roi_bins * cfg.roi_bins;
        let flat = g.reshape(pooled, &[rois.len(), width])?;
        let h = g.linear(flat, p.get("rcnn.fc.weight"), Some(p.get("rcnn.fc.bias")))?;
        let h = g.relu(h)?;
        let cls = g.linear(h, p.get("rcnn.cls.weight"), Some(p.get("rcnn.cls.bias")))?;
        let cls = g.sigmoid(cls)?;
        let reg = g.linear(h, p.get("rcnn.reg.weight"), Some(p.get("rcnn.reg.bias")))?;
        // the speaker branch sees only the speaker loss
        let e = g.linear(flat, p.get("rcnn.emb.weight"), Some(p.get("rcnn.emb.bias")))?;
        let embedding = g.relu(e)?;
        let spk = g.linear(embedding, p.get("rcnn.spk.weight"), Some(p.get("rcnn.spk.bias")))?;
        let spk = g.softmax(spk)?;
        Ok(Heads {
            embedding,
            cls,
            reg,
            spk,
        })
    }

    /// Decodes every anchor, clips to the valid part of the chunk, drops
    /// degenerate results, and filters with NMS. Returns `(interval, score)`.
    fn propose(&self, probs: &Tensor, deltas: &Tensor, valid_frames: usize, post: usize) -> Vec<(Interval, f64)> {
        let clip = Interval {
            start: 0.0,
            end: valid_frames.min(self.config.frames) as f64,
        };
        let (mut ivs, mut scores) = (Vec::new(), Vec::new());
        for (i, anchor) in self.grid.anchors.iter().enumerate() {
            let delta = scaled_delta(&deltas.data()[2 * i..2 * i + 2], &self.config.rpn_reg_std);
            if let Ok(d) = decode(delta, anchor, &clip) {
                if !d.degenerate {
                    ivs.push(d.interval);
                    scores.push(probs.data()[i]);
                }
            }
        }
        let cfg = &self.config;
        filter_indices(&ivs, &scores, cfg.pre_nms_top_n, cfg.nms_threshold, post)
            .into_iter()
            .map(|i| (ivs[i], scores[i]))
            .collect()
    }

    /// Inference on one chunk: at most `eval_post_nms` refined proposals.
    pub fn predict(&self, chunk: &FeatureChunk) -> Result<ChunkPrediction> {
        self.check_chunk(chunk)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, &self.params.tensors, false);
        let x = g.constant(chunk.matrix.clone());
        let t = self.trunk(&mut g, &p, x)?;
        let props = self.propose(
            g.value(t.rpn_probs),
            g.value(t.rpn_deltas),
            chunk.valid_frames,
            self.config.eval_post_nms,
        );
        let mut set = ProposalSet {
            chunk_origin: chunk.origin.start_frame as f64,
            embeddings: Some(Vec::new()),
            ..Default::default()
        };
        if props.is_empty() {
            return Ok(ChunkPrediction { proposals: set });
        }
        let rois: Vec<Interval> = props.iter().map(|p| p.0).collect();
        let h = self.heads(&mut g, &p, t.map, &rois)?;
        let clip = Interval {
            start: 0.0,
            end: chunk.valid_frames.min(self.config.frames) as f64,
        };
        let (emb, cls, reg) = (g.value(h.embedding), g.value(h.cls), g.value(h.reg));
        let e = self.config.embedding_dim;
        let mut embeddings = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            let delta = scaled_delta(&reg.data()[2 * r..2 * r + 2], &self.config.rcnn_reg_std);
            // a refinement that leaves the chunk keeps the unrefined region
            let refined = decode(delta, roi, &clip).map(|d| d.interval).unwrap_or(*roi);
            set.intervals.push(refined);
            set.scores.push(cls.data()[r]);
            embeddings.push(emb.data()[r * e..(r + 1) * e].to_vec());
        }
        set.embeddings = Some(embeddings);
        Ok(ChunkPrediction { proposals: set })
    }

    /// Samples anchors and regions against `truth` (chunk frames) using the
    /// current parameters for the proposals.
    pub fn plan<R: rand::Rng + ?Sized>(
        &self,
        chunk: &FeatureChunk,
        truth: &[FrameTurn],
        rng: &mut R,
    ) -> Result<TrainingPlan> {
        self.check_chunk(chunk)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, &self.params.tensors, false);
        let x = g.constant(chunk.matrix.clone());
        let t = self.trunk(&mut g, &p, x)?;
        Ok(self.plan_on(&g, &t, chunk, truth, rng))
    }

    fn plan_on<R: rand::Rng + ?Sized>(
        &self,
        g: &Graph,
        t: &Trunk,
        chunk: &FeatureChunk,
        truth: &[FrameTurn],
        rng: &mut R,
    ) -> TrainingPlan {
        let cfg = &self.config;
        let mut plan = TrainingPlan::default();
        let assign = assign_targets(&self.grid, truth);
        plan.rpn_samples = sample_minibatch(&assign, cfg.rpn_batch, cfg.fg_fraction, rng);
        for &i in &plan.rpn_samples {
            let fg = assign.labels[i] == Label::Fg;
            plan.rpn_labels.push(if fg { 1.0 } else { 0.0 });
            if fg {
                let j = assign.matched[i].expect("fg anchors have a match");
                plan.rpn_fg.push(i);
                let d = encode(&truth[j].interval, &self.grid.anchors[i]);
                plan.rpn_fg_targets.push(normalized_target(d, &cfg.rpn_reg_std));
            }
        }

        let props = self.propose(
            g.value(t.rpn_probs),
            g.value(t.rpn_deltas),
            chunk.valid_frames,
            cfg.train_post_nms,
        );
        let mut cands: Vec<Interval> = props.into_iter().map(|p| p.0).collect();
        cands.extend(truth.iter().map(|t| t.interval));
        let assign = assign_labels(&cands, truth, FG_IOU, BG_IOU, false);
        let picked = sample_minibatch(&assign, cfg.rcnn_batch, cfg.fg_fraction, rng);
        for (pos, &i) in picked.iter().enumerate() {
            plan.rois.push(cands[i]);
            let fg = assign.labels[i] == Label::Fg;
            plan.roi_labels.push(if fg { 1.0 } else { 0.0 });
            if fg {
                let j = assign.matched[i].expect("fg regions have a match");
                plan.roi_fg.push(pos);
                let d = encode(&truth[j].interval, &cands[i]);
                plan.roi_fg_targets.push(normalized_target(d, &cfg.rcnn_reg_std));
                plan.roi_fg_speakers.push(truth[j].speaker);
            }
        }
        plan
    }

    fn loss_vars(&self, g: &mut Graph, p: &ParamVars, chunk: &FeatureChunk, plan: &TrainingPlan) -> TResult<LossVars> {
        let x = g.constant(chunk.matrix.clone());
        let t = self.trunk(g, p, x)?;
        self.loss_terms(g, p, &t, plan)
    }

    fn loss_terms(&self, g: &mut Graph, p: &ParamVars, t: &Trunk, plan: &TrainingPlan) -> TResult<LossVars> {
        let mut lv = LossVars::default();
        let n_rpn = plan.rpn_samples.len() as f64;
        if !plan.rpn_samples.is_empty() {
            let probs = g.gather_rows(t.rpn_probs, &plan.rpn_samples)?;
            lv.rpn_cls = Some(binary_cls_loss_var(g, probs, &plan.rpn_labels, n_rpn)?);
        }
        if !plan.rpn_fg.is_empty() {
            let d = g.gather_rows(t.rpn_deltas, &plan.rpn_fg)?;
            lv.rpn_reg = Some(smooth_l1_loss_var(g, d, &plan.rpn_fg_targets, n_rpn)?);
        }
        if !plan.rois.is_empty() {
            let n = plan.rois.len() as f64;
            let h = self.heads(g, p, t.map, &plan.rois)?;
            lv.rcnn_cls = Some(binary_cls_loss_var(g, h.cls, &plan.roi_labels, n)?);
            if !plan.roi_fg.is_empty() {
                let d = g.gather_rows(h.reg, &plan.roi_fg)?;
                lv.rcnn_reg = Some(smooth_l1_loss_var(g, d, &plan.roi_fg_targets, n)?);
                let s = g.gather_rows(h.spk, &plan.roi_fg)?;
                let nf = plan.roi_fg.len() as f64;
                lv.spk_cls = Some(speaker_cls_loss_var(g, s, &plan.roi_fg_speakers, nf)?);
            }
        }
        Ok(lv)
    }

    /// Total loss of a frozen plan as a graph function of the given parameter
    /// values (in layout order). Used for gradient checks.
    pub fn plan_loss(&self, g: &mut Graph, params: &[Var], chunk: &FeatureChunk, plan: &TrainingPlan) -> TResult<Var> {
        let p = ParamVars(self.params.names.iter().cloned().zip(params.iter().copied()).collect());
        let lv = self.loss_vars(g, &p, chunk, plan)?;
        match lv.total(g, self.config.alpha)? {
            Some(v) => Ok(v),
            None => Ok(g.constant(Tensor::scalar(0.0))),
        }
    }

    /// Loss breakdown and parameter gradients for one planned chunk.
    pub fn gradients(&self, chunk: &FeatureChunk, plan: &TrainingPlan) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, &self.params.tensors, true);
        let lv = self.loss_vars(&mut g, &p, chunk, plan)?;
        self.backprop(g, &p, &lv)
    }

    /// `plan` followed by `gradients`, sharing one forward pass.
    pub fn plan_and_gradients<R: rand::Rng + ?Sized>(
        &self,
        chunk: &FeatureChunk,
        truth: &[FrameTurn],
        rng: &mut R,
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        self.check_chunk(chunk)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, &self.params.tensors, true);
        let x = g.constant(chunk.matrix.clone());
        let t = self.trunk(&mut g, &p, x)?;
        let plan = self.plan_on(&g, &t, chunk, truth, rng);
        let lv = self.loss_terms(&mut g, &p, &t, &plan)?;
        self.backprop(g, &p, &lv)
    }

    fn backprop(&self, mut g: Graph, p: &ParamVars, lv: &LossVars) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let breakdown = lv.breakdown(&g, self.config.alpha);
        let grads = match lv.total(&mut g, self.config.alpha)? {
            Some(total) => {
                g.backward(total)?;
                self.params.names.iter().map(|n| g.grad(p.get(n))).collect()
            }
            None => self.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        };
        Ok((breakdown, grads))
    }

    /// Chunks a whole recording, predicts every chunk, and post-processes.
    pub fn diarize(&self, features: &FeatureChunk, cfg: &PostprocessConfig) -> Result<PostprocessOutput> {
        let chunks = chunk_recording(features, self.config.frames, self.config.frames);
        let sets: Vec<ProposalSet> = chunks
            .par_iter()
            .map(|c| self.predict(c).map(|p| p.proposals))
            .collect::<Result<_>>()?;
        Ok(postprocess(
            &features.origin.recording,
            &sets,
            features.frame_shift_s,
            cfg,
        )?)
    }
}

/// Head output to coordinate delta, with the length change capped.
fn scaled_delta(raw: &[f64], std: &[f64]) -> CoordDelta {
    CoordDelta {
        dx: raw[0] * std[0],
        dw: (raw[1] * std[1]).min(MAX_DW),
    }
}

fn normalized_target(d: CoordDelta, std: &[f64]) -> CoordDelta {
    CoordDelta {
        dx: d.dx / std[0],
        dw: d.dw / std[1],
    }
}

// ---------------------------------------------------------------------------
// training

/// A chunk with its truth in chunk frames and dense speaker indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub chunk: FeatureChunk,
    pub truth: Vec<FrameTurn>,
}

impl TrainExample {
    /// `annotation` is chunk-relative, in seconds. Turns are clipped to the
    /// valid frames; speakers are looked up in `speakers`.
    pub fn new(chunk: FeatureChunk, annotation: &Annotation, speakers: &[String]) -> Result<Self> {
        let canon = io::canonicalize(annotation);
        let limit = chunk.valid_frames as f64;
        let mut truth = Vec::new();
        for t in &canon.turns {
            let speaker = speakers
                .iter()
                .position(|s| *s == t.speaker)
                .ok_or_else(|| ModelError::UnknownSpeaker(t.speaker.clone()))?;
            let start = (t.interval.start / chunk.frame_shift_s).max(0.0);
            let end = (t.interval.end / chunk.frame_shift_s).min(limit);
            if end > start {
                truth.push(FrameTurn {
                    interval: Interval { start, end },
                    speaker,
                });
            }
        }
        Ok(TrainExample { chunk, truth })
    }
}

/// Model plus momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let velocity = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Trainer {
            model,
            velocity,
            step: 0,
        }
    }

    /// Sampling stream for the current step.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(self.step.wrapping_add(1));
        rng
    }

    /// One momentum update on the mean loss of `batch`. Examples are planned
    /// and differentiated in order and their gradients summed in that order.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty training batch".into()));
        }
        let mut rng = self.step_rng();
        let mut sum: Vec<Tensor> = self
            .model
            .params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let (bd, grads) = match self.model.plan_and_gradients(&ex.chunk, &ex.truth, &mut rng) {
                Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                    return Err(ModelError::NonFiniteLoss {
                        step: self.step,
                        term: op.to_string(),
                        value: f64::NAN,
                        dump: format!("non-finite output of {op} while building the loss"),
                    })
                }
                r => r?,
            };
            if let Some((term, value)) = bd.terms().into_iter().find(|(_, v)| !v.is_finite()) {
                return Err(ModelError::NonFiniteLoss {
                    step: self.step,
                    term: term.to_string(),
                    value,
                    dump: format!("{bd:?}"),
                });
            }
            for (s, g) in sum.iter_mut().zip(&grads) {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            parts.push(bd);
        }
        let inv = 1.0 / batch.len() as f64;
        let mut norm2 = 0.0;
        for s in &mut sum {
            for v in s.data_mut() {
                *v *= inv;
                norm2 += *v * *v;
            }
        }
        let clip = self.model.config.grad_clip;
        let scale = if clip > 0.0 && norm2.sqrt() > clip {
            clip / norm2.sqrt()
        } else {
            1.0
        };
        let lr = self.model.config.lr_at(self.step);
        let mu = self.model.config.momentum;
        for ((p, v), g) in self.model.params.tensors.iter_mut().zip(&mut self.velocity).zip(&sum) {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(LossBreakdown::mean(&parts))
    }

    /// Switches to adaptation: new speaker inventory with a freshly
    /// initialized speaker head, adaptation learning rate and α, no decay,
    /// momentum reset. Detection weights are kept.
    pub fn into_adaptation(self, speakers: Vec<String>, lr: f64, seed: u64) -> Result<Trainer> {
        let mut cfg = self.model.config.clone();
        cfg.speakers = speakers;
        cfg.lr = lr;
        cfg.alpha = ALPHA_ADAPT;
        cfg.decay_steps.clear();
        cfg.seed = seed;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.model.params.clone();
        for (name, shape, init) in param_layout(&cfg) {
            if name.starts_with("rcnn.spk.") {
                let i = params.names.iter().position(|n| *n == name).expect("layout is stable");
                params.tensors[i] = init_tensor(&shape, init, &mut rng);
            }
        }
        Ok(Trainer::new(Model::from_params(cfg, params)?))
    }
}

/// Adaptation learning rate.
pub const ADAPT_LR: f64 = 4e-5;

// ---------------------------------------------------------------------------
// checkpoints

const CKPT_MAGIC: &[u8; 8] = b"RPNSDCK1";
const CKPT_VERSION: u32 = 1;

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u64(b, s.len() as u64);
    b.extend_from_slice(s.as_bytes());
}

fn put_tensors(b: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    put_u64(b, tensors.len() as u64);
    for (n, t) in names.iter().zip(tensors) {
        put_str(b, n);
        put_u32(b, t.ndim() as u32);
        for &d in t.shape() {
            put_u64(b, d as u64);
        }
        for &v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(ModelError::Checkpoint(format!("length {v} exceeds the file")));
        }
        Ok(v as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Checkpoint("invalid UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<(Vec<String>, Vec<Tensor>)> {
        let count = self.len()?;
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for _ in 0..count {
            names.push(self.string()?);
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.len()?);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| ModelError::Checkpoint("overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok((names, tensors))
    }
}

impl Trainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut b, CKPT_VERSION);
        put_str(&mut b, &self.model.config.to_text());
        put_tensors(&mut b, &self.model.params.names, &self.model.params.tensors);
        put_tensors(&mut b, &self.model.params.names, &self.velocity);
        put_u64(&mut b, self.step);
        put_u64(&mut b, self.model.config.seed);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {version}, this build reads {CKPT_VERSION}"
            )));
        }
        let config = ModelConfig::from_text(&r.string()?)?;
        let (names, tensors) = r.tensors()?;
        let (vnames, velocity) = r.tensors()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        if vnames != names || seed != config.seed {
            return Err(ModelError::Checkpoint(
                "optimizer state does not match the parameters".into(),
            ));
        }
        if velocity.iter().zip(&tensors).any(|(v, t)| v.shape() != t.shape()) {
            return Err(ModelError::Checkpoint("velocity shapes differ from parameters".into()));
        }
        let model = Model::from_params(config, Params { names, tensors })?;
        Ok(Trainer { model, velocity, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(io::write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io::io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and requires the same network geometry as `expected`.
    pub fn load_compatible(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let t = Self::load(path)?;
        let (have, want) = (t.model.config.geometry(), expected.geometry());
        if have != want {
            return Err(ModelError::Geometry(format!("checkpoint has {have}, expected {want}")));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    fn micro_chunk(seed: u64) -> FeatureChunk {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0, 2.0).unwrap();
        let m = Tensor::from_fn(&[4, 64], |_| u.sample(&mut rng));
        FeatureChunk::new(m, 0.01, "micro")
    }

    fn micro_truth() -> Vec<FrameTurn> {
        vec![
            FrameTurn {
                interval: Interval { start: 4.0, end: 20.0 },
                speaker: 0,
            },
            FrameTurn {
                interval: Interval { start: 16.0, end: 50.0 },
                speaker: 2,
            },
        ]
    }

    #[test]
    fn reference_geometry_has_63_steps_and_567_anchors() {
        let cfg = ModelConfig {
            speakers: vec!["x".into()],
            ..ModelConfig::reference_geometry()
        };
        assert_eq!(cfg.timesteps(), 63);
        assert_eq!(cfg.frames_per_step(), 16);
        assert_eq!(cfg.freq_cells(), 17);
        assert_eq!(cfg.anchor_grid().len(), 567);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            speakers: vec!["a".into(), "b".into()],
            lr: 0.1 + 0.2,
            ..Default::default()
        };
        let text = cfg.to_text();
        assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
        let mut keys: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
        let sorted = {
            let mut k = keys.clone();
            k.sort();
            k
        };
        assert_eq!(keys, sorted);
        keys.clear();
        assert!(ModelConfig::from_text("bogus = 1").is_err());
        assert!(ModelConfig::from_text("# c\nlr = 0.5 # trailing\n").unwrap().lr == 0.5);
    }

    #[test]
    fn lr_schedule_decays_twice() {
        let cfg = ModelConfig {
            decay_steps: vec![10, 20],
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(10) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(25) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn predict_is_bounded_and_deterministic() {
        let model = Model::new(ModelConfig::micro()).unwrap();
        let mut chunk = micro_chunk(1);
        chunk.valid_frames = 40;
        let a = model.predict(&chunk).unwrap();
        let b = model.predict(&chunk).unwrap();
        assert_eq!(a, b);
        assert!(a.proposals.len() <= 5);
        for iv in &a.proposals.intervals {
            assert!(iv.start >= 0.0 && iv.end <= 40.0, "{iv:?}");
        }
        let bad = FeatureChunk::new(Tensor::zeros(&[4, 63]), 0.01, "x");
        assert!(matches!(model.predict(&bad), Err(ModelError::Geometry(_))));
    }

    #[test]
    fn micro_model_has_few_parameters() {
        assert!(Model::new(ModelConfig::micro()).unwrap().params.count() <= 5000);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let model = Model::new(ModelConfig::micro()).unwrap();
        let chunk = micro_chunk(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = model.plan(&chunk, &micro_truth(), &mut rng).unwrap();
        assert!(!plan.roi_fg.is_empty() && !plan.rpn_fg.is_empty());
        let err = grad_check_multi(
            |g, vars| model.plan_loss(g, vars, &chunk, &plan),
            &model.params.tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fused_planning_matches_separate_passes() {
        let m = Model::new(ModelConfig::micro()).unwrap();
        let (chunk, truth) = (micro_chunk(4), micro_truth());
        let plan = m.plan(&chunk, &truth, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, ga) = m.gradients(&chunk, &plan).unwrap();
        let (b, gb) = m
            .plan_and_gradients(&chunk, &truth, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn empty_truth_gives_only_classification_terms() {
        let model = Model::new(ModelConfig::micro()).unwrap();
        let ex = TrainExample {
            chunk: micro_chunk(4),
            truth: vec![],
        };
        let mut t = Trainer::new(model);
        let bd = t.train_step(&[ex]).unwrap();
        assert!(bd.rpn_cls > 0.0 && bd.rcnn_cls > 0.0);
        assert_eq!((bd.rpn_reg, bd.rcnn_reg, bd.spk_cls), (0.0, 0.0, 0.0));
    }

    #[test]
    fn train_step_deterministic_and_checkpoint_round_trip() {
        let ex = TrainExample {
            chunk: micro_chunk(5),
            truth: micro_truth(),
        };
        let mut a = Trainer::new(Model::new(ModelConfig::micro()).unwrap());
        let mut b = a.clone();
        for _ in 0..3 {
            assert_eq!(
                a.train_step(std::slice::from_ref(&ex)).unwrap(),
                b.train_step(std::slice::from_ref(&ex)).unwrap()
            );
        }
        assert_eq!(a, b);
        let bytes = a.to_bytes();
        let back = Trainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(
            back.model.predict(&ex.chunk).unwrap(),
            a.model.predict(&ex.chunk).unwrap()
        );

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(Trainer::from_bytes(&corrupt), Err(ModelError::Checkpoint(_))));
        assert!(matches!(
            Trainer::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Checkpoint(_))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Trainer::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn geometry_mismatch_on_load() {
        let dir = std::env::temp_dir().join(format!("rpnsd-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let t = Trainer::new(Model::new(ModelConfig::micro()).unwrap());
        t.save(&path).unwrap();
        let other = ModelConfig {
            channels: vec![2, 4],
            ..ModelConfig::micro()
        };
        assert!(matches!(
            Trainer::load_compatible(&path, &other),
            Err(ModelError::Geometry(_))
        ));
        assert!(Trainer::load_compatible(&path, &ModelConfig::micro()).is_ok());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adaptation_keeps_detection_weights() {
        let t = Trainer::new(Model::new(ModelConfig::micro()).unwrap());
        let before = t.model.clone();
        let a = t.into_adaptation(vec!["n1".into(), "n2".into()], ADAPT_LR, 9).unwrap();
        assert_eq!(a.model.config.alpha, 0.1);
        assert_eq!(a.model.config.lr, 4e-5);
        for (n, t) in a.model.params.names.iter().zip(&a.model.params.tensors) {
            if n.starts_with("rcnn.spk.") {
                assert_eq!(t.shape()[0], 2);
            } else {
                assert_eq!(Some(t), before.params.get(n));
            }
        }
        let chunk = micro_chunk(6);
        let (p, q) = (before.predict(&chunk).unwrap(), a.model.predict(&chunk).unwrap());
        assert_eq!(p, q);
    }

    #[test]
    fn train_example_conversion() {
        let chunk = FeatureChunk::new(Tensor::zeros(&[4, 64]), 0.01, "r");
        let ann = Annotation::with_turns(
            "r",
            vec![
                crate::pipeline::Turn::new("b", 0.1, 0.3),
                crate::pipeline::Turn::new("a", 0.5, 0.9),
            ],
        );
        let ex = TrainExample::new(chunk.clone(), &ann, &["a".into(), "b".into()]).unwrap();
        assert_eq!(ex.truth.len(), 2);
        assert_eq!(ex.truth[0].speaker, 1);
        assert!((ex.truth[0].interval.start - 10.0).abs() < 1e-9);
        assert!((ex.truth[1].interval.end - 64.0).abs() < 1e-9);
        assert!(matches!(
            TrainExample::new(chunk, &ann, &["a".into()]),
            Err(ModelError::UnknownSpeaker(_))
        ));
    }
}
