//! The four-expert model: skeleton, RGB, dual-attention fusion and SDD streams.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::{Config, JointSubset, ModelConfig};
use crate::error::{Error, Result};
use crate::flops::{self, LayerSpec};
use crate::fusion::{FusionOutput, FusionStream};
use crate::rgb::{ChannelStats, RgbOutput, RgbStream};
use crate::scalar::Scalar;
use crate::sdd::{SddOutput, SddStream};
use crate::skeleton::{select_layout, JointLayout};
use crate::stgraph::{build_adjacency, SkeletonOutput, SkeletonStream};
use crate::tensor::Tensor;

/// Expert stream identifiers, in ensemble order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Skeleton,
    Rgb,
    Fusion,
    Sdd,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Skeleton, Stream::Rgb, Stream::Fusion, Stream::Sdd];
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Skeleton => "skeleton",
            Stream::Rgb => "rgb",
            Stream::Fusion => "fusion",
            Stream::Sdd => "sdd",
        })
    }
}

/// One mini-batch of prepared inputs.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `(N, M, 3, T, V)` normalized skeletons.
    pub skeleton: Tensor<T>,
    /// `(N, 3, H, W)` standardised ST-ROI mosaics, when the RGB backbone runs.
    pub rgb: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Tape values of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `(N, classes)` logits of every enabled stream, in [`Stream::ALL`] order.
    pub logits: Vec<(Stream, Var)>,
    pub skeleton: Option<SkeletonOutput>,
    pub rgb: Option<RgbOutput>,
    pub fusion: Option<FusionOutput>,
    pub sdd: Option<SddOutput>,
}

impl ModelOutput {
    pub fn stream(&self, s: Stream) -> Option<Var> {
        self.logits.iter().find(|(k, _)| *k == s).map(|&(_, v)| v)
    }
}

#[derive(Serialize)]
struct FingerprintFields<'a> {
    layout: &'a str,
    joints: usize,
    frames: usize,
    roi: [usize; 2],
    model: &'a ModelConfig,
}

/// Model parameters plus the fixed structure they plug into.
pub struct IPayModel<T> {
    pub config: Config,
    /// Layout of the data the model was built for.
    pub base_layout: Arc<JointLayout>,
    /// Layout after joint selection; the model's `V`.
    pub layout: Arc<JointLayout>,
    pub params: ParamStore<T>,
    pub skeleton: Option<SkeletonStream<T>>,
    pub rgb: Option<RgbStream<T>>,
    pub fusion: Option<FusionStream>,
    pub sdd: Option<SddStream>,
    pub rgb_stats: ChannelStats,
}

/// Layout the model sees for `base` under the configured joint subset.
pub fn model_layout(cfg: &Config, base: &JointLayout) -> Result<JointLayout> {
    match cfg.data.joints {
        JointSubset::Whole => Ok(base.clone()),
        JointSubset::Upper => select_layout(base, &base.upper_body()),
    }
}

impl<T: Scalar> IPayModel<T> {
    /// Fresh model with parameters drawn from `cfg.seed`.
    pub fn new(cfg: &Config, base_layout: &JointLayout) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(model_layout(cfg, base_layout)?);
        let graph = build_adjacency::<T>(&layout)?;
        let m = &cfg.model;
        let classes = m.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let s = &m.streams;
        let skeleton = s
            .needs_skeleton()
            .then(|| SkeletonStream::new(&mut params, &m.skeleton, &graph, classes, s.skeleton, &mut rng));
        let rgb = s.needs_rgb().then(|| RgbStream::new(&mut params, &m.rgb, classes, s.rgb, &mut rng));
        let fusion = match (s.fusion, &skeleton, &rgb) {
            (true, Some(sk), Some(r)) => Some(FusionStream::new(
                &mut params,
                &m.fusion,
                sk.backbone.out_channels(),
                r.backbone.out_channels(),
                classes,
                &mut rng,
            )),
            _ => None,
        };
        let sdd = match (s.sdd, &skeleton) {
            (true, Some(sk)) => Some(SddStream::new(&mut params, &m.sdd, sk.backbone.first_stage_channels(), classes, &mut rng)),
            _ => None,
        };
        Ok(Self { config: cfg.clone(), base_layout: Arc::new(base_layout.clone()), layout, params, skeleton, rgb, fusion, sdd, rgb_stats: ChannelStats::default() })
    }

    pub fn num_classes(&self) -> usize {
        self.config.model.num_classes
    }

    pub fn streams(&self) -> Vec<Stream> {
        let s = &self.config.model.streams;
        Stream::ALL
            .into_iter()
            .filter(|k| match k {
                Stream::Skeleton => s.skeleton,
                Stream::Rgb => s.rgb,
                Stream::Fusion => self.fusion.is_some(),
                Stream::Sdd => self.sdd.is_some(),
            })
            .collect()
    }

    pub fn needs_rgb(&self) -> bool {
        self.rgb.is_some()
    }

    /// Identity of everything that fixes parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        let roi = &self.config.data.roi;
        serde_json::to_string(&FingerprintFields {
            layout: &self.layout.name,
            joints: self.layout.num_joints(),
            frames: self.config.data.frames,
            roi: [roi.height(), roi.width()],
            model: &self.config.model,
        })
        .expect("fingerprint serializes")
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>) -> Result<ModelOutput> {
        let s = batch.skeleton.shape();
        if s.len() != 5 || s[4] != self.layout.num_joints() {
            return Err(Error::shape(format!(
                "skeleton batch {s:?} does not match layout `{}` ({} joints)",
                self.layout.name,
                self.layout.num_joints()
            )));
        }
        let n = s[0];
        let skeleton = self.skeleton.as_ref().map(|st| st.forward(tape, &batch.skeleton)).transpose()?;
        let rgb = match &self.rgb {
            Some(r) => {
                let x = batch.rgb.as_ref().ok_or_else(|| Error::shape("batch has no RGB input"))?;
                if x.shape()[0] != n {
                    return Err(Error::shape("skeleton and RGB batch sizes differ"));
                }
                Some(r.forward(tape, x)?)
            }
            None => None,
        };
        let fusion = match (&self.fusion, &skeleton, &rgb) {
            (Some(f), Some(sk), Some(r)) => Some(f.forward(tape, sk.backbone.features, r.features, n)?),
            _ => None,
        };
        let sdd = match (&self.sdd, &skeleton) {
            (Some(d), Some(sk)) => {
                let hands = [self.layout.left_hand, self.layout.right_hand];
                Some(d.forward(tape, sk.backbone.first_stage, &batch.skeleton, hands)?)
            }
            _ => None,
        };
        let mut logits = Vec::new();
        if let Some(l) = skeleton.and_then(|o| o.logits) {
            logits.push((Stream::Skeleton, l));
        }
        if let Some(l) = rgb.and_then(|o| o.logits) {
            logits.push((Stream::Rgb, l));
        }
        if let Some(f) = &fusion {
            logits.push((Stream::Fusion, f.logits));
        }
        if let Some(d) = &sdd {
            logits.push((Stream::Sdd, d.logits));
        }
        Ok(ModelOutput { logits, skeleton, rgb, fusion, sdd })
    }

    /// Per-sample layer list for a single-person clip.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let frames = self.config.data.frames;
        let v = self.layout.num_joints();
        let roi = &self.config.data.roi;
        let (h, w) = (roi.height(), roi.width());
        let mut specs = Vec::new();
        if let Some(s) = &self.skeleton {
            specs.extend(s.layer_specs(frames, v));
        }
        if let Some(r) = &self.rgb {
            specs.extend(r.layer_specs(h, w));
        }
        if let (Some(f), Some(s), Some(r)) = (&self.fusion, &self.skeleton, &self.rgb) {
            let (t_s, v_s) = s.backbone.out_size(frames, v);
            let (hr, wr) = r.backbone.out_size(h, w);
            specs.extend(f.layer_specs(t_s, v_s, hr * wr));
        }
        if let Some(d) = &self.sdd {
            specs.extend(d.layer_specs(v, frames));
        }
        specs
    }
}

/// Per-sample `(flops, params)` of the model described by `cfg` on `layout`.
pub fn count_flops_params(cfg: &Config, layout: &JointLayout) -> Result<(u64, u64)> {
    let model = IPayModel::<f32>::new(cfg, layout)?;
    Ok(flops::total(&model.layer_specs()))
}
