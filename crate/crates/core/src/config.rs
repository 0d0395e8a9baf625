//! Run configuration: model shape, data preparation and optimisation.
//!
//! Configs are TOML files; every field has a default so a file only needs the
//! keys it changes. Named presets (see [`Config::preset`]) cover the ablation
//! arms and a reduced-width desk-scale setup. Presets compose with `+`, e.g.
//! `desk+ablation_2ensemble`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::AlignMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Streams {
    pub skeleton: bool,
    pub rgb: bool,
    pub fusion: bool,
    pub sdd: bool,
}

impl Default for Streams {
    fn default() -> Self {
        Self { skeleton: true, rgb: true, fusion: true, sdd: true }
    }
}

impl Streams {
    pub fn count(&self) -> usize {
        [self.skeleton, self.rgb, self.fusion, self.sdd].iter().filter(|&&b| b).count()
    }

    /// Whether the skeleton backbone must run.
    pub fn needs_skeleton(&self) -> bool {
        self.skeleton || self.fusion || self.sdd
    }

    /// Whether the RGB backbone must run.
    pub fn needs_rgb(&self) -> bool {
        self.rgb || self.fusion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Dual,
    /// Only the RGB-queries-skeleton direction.
    SingleRgbQuery,
    /// Only the skeleton-queries-RGB direction.
    SingleSkeQuery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionHead {
    /// Gate the fused embeddings, then a linear classifier.
    LinearAfterGate,
    /// The gated embedding is the logit vector (`dim` must equal the class count).
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonTokens {
    /// One token per time step, averaged over joints.
    PooledJoints,
    /// One token per (time step, joint).
    PerJoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbBackboneKind {
    /// Stem convolution plus one residual block per stage.
    Residual,
    /// 18-layer residual network layout (7x7 stem, max pool, 2 blocks per stage).
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkeletonConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 256], strides: vec![1, 2, 2], temporal_kernel: 9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgbConfig {
    pub backbone: RgbBackboneKind,
    pub stem_width: usize,
    pub widths: Vec<usize>,
}

impl Default for RgbConfig {
    fn default() -> Self {
        Self { backbone: RgbBackboneKind::Residual, stem_width: 32, widths: vec![32, 64, 128, 256] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub dim: usize,
    pub heads: usize,
    pub attention: AttentionMode,
    pub head: FusionHead,
    pub skeleton_tokens: SkeletonTokens,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 1,
            attention: AttentionMode::Dual,
            head: FusionHead::LinearAfterGate,
            skeleton_tokens: SkeletonTokens::PooledJoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SddConfig {
    /// Number of top-weighted joints aggregated into each anchor.
    pub k: usize,
    pub mlp_hidden: usize,
    pub tcn_width: usize,
    pub tcn_kernel: usize,
}

impl Default for SddConfig {
    fn default() -> Self {
        Self { k: 8, mlp_hidden: 64, tcn_width: 64, tcn_kernel: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub streams: Streams,
    pub skeleton: SkeletonConfig,
    pub rgb: RgbConfig,
    pub fusion: FusionConfig,
    pub sdd: SddConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            streams: Streams::default(),
            skeleton: SkeletonConfig::default(),
            rgb: RgbConfig::default(),
            fusion: FusionConfig::default(),
            sdd: SddConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointSubset {
    #[default]
    Whole,
    Upper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    /// Frames sampled per clip (mosaic width in boxes).
    pub frames: usize,
    /// Crop side in source pixels.
    pub box_size: usize,
    /// Side each crop is resized to.
    pub box_out: usize,
    pub informative_joints: Vec<String>,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            box_size: 64,
            box_out: 56,
            informative_joints: vec!["left_middle_finger3".into(), "right_middle_finger3".into()],
        }
    }
}

impl RoiConfig {
    pub fn height(&self) -> usize {
        self.box_out * self.informative_joints.len()
    }

    pub fn width(&self) -> usize {
        self.box_out * self.frames
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames: usize,
    pub align_mode: AlignMode,
    pub joints: JointSubset,
    /// Maximum shift as a fraction of the clip's median hip distance.
    pub shift_frac: f64,
    pub rot_max_deg: f64,
    pub roi: RoiConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            align_mode: AlignMode::PerFrame,
            joints: JointSubset::Whole,
            shift_frac: 0.1,
            rot_max_deg: 15.0,
            roi: RoiConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub cosine_end_epoch: f64,
    pub cosine_floor: f64,
    pub step_milestones: Vec<f64>,
    pub step_gamma: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Parallel workers for data preparation; 1 is the reproducible mode.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            peak_lr: 0.06,
            warmup_epochs: 5.0,
            cosine_end_epoch: 60.0,
            cosine_floor: 0.006,
            step_milestones: vec![60.0, 70.0],
            step_gamma: 0.1,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 4e-4,
            grad_clip: 0.0,
            workers: 1,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self { seed: 0, model: ModelConfig::default(), data: DataConfig::default(), train: TrainConfig::default() }
    }
}

pub const PRESETS: &[&str] = &[
    "default",
    "desk",
    "ablation_2ensemble",
    "ablation_3ensemble",
    "joint_only",
    "rgb_only",
    "sdd_only",
    "single_attn_ske",
    "single_attn_rgb",
    "upper_body",
    "no_alignment",
];

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// A preset name (or `+`-joined overlay list) or a path to a TOML file.
    pub fn resolve(spec: &str) -> Result<Self> {
        let p = Path::new(spec);
        if p.is_file() {
            return Self::load(p);
        }
        Self::preset(spec)
    }

    pub fn preset(spec: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for name in spec.split('+').map(str::trim) {
            cfg.apply_overlay(name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_overlay(&mut self, name: &str) -> Result<()> {
        let streams = |s, r, f, d| Streams { skeleton: s, rgb: r, fusion: f, sdd: d };
        match name {
            "default" | "" => {}
            "desk" => self.apply_desk(),
            "ablation_2ensemble" => self.model.streams = streams(true, true, false, false),
            "ablation_3ensemble" => self.model.streams = streams(true, true, true, false),
            "joint_only" => self.model.streams = streams(true, false, false, false),
            "rgb_only" => self.model.streams = streams(false, true, false, false),
            "sdd_only" => self.model.streams = streams(false, false, false, true),
            "single_attn_ske" => self.model.fusion.attention = AttentionMode::SingleSkeQuery,
            "single_attn_rgb" => self.model.fusion.attention = AttentionMode::SingleRgbQuery,
            "upper_body" => self.data.joints = JointSubset::Upper,
            "no_alignment" => self.data.align_mode = AlignMode::FirstFrame,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Reduced widths, a gentler learning rate and gradient clipping for single-core CPU training.
    fn apply_desk(&mut self) {
        let m = &mut self.model;
        m.skeleton = SkeletonConfig { widths: vec![12, 16, 16], strides: vec![2, 2, 1], temporal_kernel: 5 };
        m.rgb = RgbConfig { backbone: RgbBackboneKind::Residual, stem_width: 8, widths: vec![8, 16] };
        m.fusion.dim = 16;
        m.sdd = SddConfig { k: 8, mlp_hidden: 16, tcn_width: 64, tcn_kernel: 5 };
        self.data.roi.box_size = 32;
        self.data.roi.box_out = 16;
        let t = &mut self.train;
        t.peak_lr = 0.01;
        t.cosine_floor = 0.001;
        t.grad_clip = 5.0;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if !(t.peak_lr > 0.0) {
            return bad("peak_lr must be positive".into());
        }
        if !(0.0 < t.warmup_epochs && t.warmup_epochs < t.cosine_end_epoch && t.cosine_end_epoch <= t.epochs as f64) {
            return bad(format!(
                "need 0 < warmup_epochs ({}) < cosine_end_epoch ({}) <= epochs ({})",
                t.warmup_epochs, t.cosine_end_epoch, t.epochs
            ));
        }
        if t.batch_size == 0 || t.workers == 0 {
            return bad("batch_size and workers must be at least 1".into());
        }
        let m = &self.model;
        if m.streams.count() == 0 {
            return bad("at least one stream must be enabled".into());
        }
        if m.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if m.skeleton.widths.is_empty() || m.skeleton.widths.len() != m.skeleton.strides.len() {
            return bad("skeleton widths and strides must be non-empty and the same length".into());
        }
        if m.skeleton.temporal_kernel % 2 == 0 || m.sdd.tcn_kernel % 2 == 0 {
            return bad("temporal kernels must be odd".into());
        }
        if m.rgb.widths.is_empty() {
            return bad("rgb widths must be non-empty".into());
        }
        if m.fusion.heads == 0 || m.fusion.dim % m.fusion.heads != 0 {
            return bad(format!("fusion dim {} not divisible by {} heads", m.fusion.dim, m.fusion.heads));
        }
        if m.fusion.head == FusionHead::Identity && m.fusion.dim != m.num_classes {
            return bad("identity fusion head needs dim == num_classes".into());
        }
        if m.sdd.k == 0 {
            return bad("sdd.k must be at least 1".into());
        }
        let r = &self.data.roi;
        if r.frames == 0 || r.box_size == 0 || r.box_out == 0 || r.informative_joints.is_empty() {
            return bad("roi frames, box sizes and informative joints must be non-empty".into());
        }
        if self.data.frames == 0 {
            return bad("data.frames must be positive".into());
        }
        Ok(())
    }
}
