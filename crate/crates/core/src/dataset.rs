//! Dataset manifests, clip loading and per-model preparation.
//!
//! A manifest is a JSON file listing samples; every path inside it is relative
//! to the manifest's directory. Skeleton payloads are raw little-endian `f32`
//! arrays in `(M, 3, T, V)` order and frames are PNG files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbFrame;
use crate::model::IPayModel;
use crate::rgb::{build_st_roi, ChannelStats, RoiGeometry, StRoiImage};
use crate::scalar::Scalar;
use crate::skeleton::{normalize_with, resample_uniform, select_joints, JointLayout, SkeletonSequence};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Action classes of the payment benchmark, in label order.
pub const CLASS_NAMES: [&str; 5] = ["QR Code", "Cash", "Evade", "Swipe", "Tap"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFile {
    pub file: PathBuf,
    /// `[M, C, T, V]`.
    pub dims: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub skeleton: SkeletonFile,
    pub frames: Vec<PathBuf>,
    /// Per frame, the `(x, y)` pixel position of each informative joint.
    pub joints2d: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// Built-in layout name, or the name of `layout_def`.
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_def: Option<JointLayout>,
    pub classes: Vec<String>,
    /// Joint names whose 2-D positions `joints2d` lists, in order.
    pub informative_joints: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve_layout(&self) -> Result<JointLayout> {
        let layout = match &self.layout_def {
            Some(def) if def.name == self.layout => def.clone(),
            Some(def) => return Err(bad(format!("layout `{}` but layout_def is `{}`", self.layout, def.name))),
            None => JointLayout::builtin(&self.layout).ok_or_else(|| bad(format!("unknown layout `{}`", self.layout)))?,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Checks every structural rule and that referenced files exist with the declared sizes.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", self.version)));
        }
        let layout = self.resolve_layout()?;
        if self.classes.len() < 2 {
            return Err(bad("need at least two classes"));
        }
        if self.informative_joints.is_empty() {
            return Err(bad("informative_joints is empty"));
        }
        let mut ids = BTreeMap::new();
        for s in &self.samples {
            let at = |m: String| bad(format!("sample `{}`: {m}", s.id));
            if ids.insert(s.id.as_str(), ()).is_some() {
                return Err(at("duplicate id".into()));
            }
            if s.label >= self.classes.len() {
                return Err(Error::LabelOutOfRange { label: s.label, classes: self.classes.len() });
            }
            let [m, c, t, v] = s.skeleton.dims;
            if c != 3 || m == 0 || t == 0 || v != layout.num_joints() {
                return Err(at(format!("skeleton dims {:?} invalid for layout `{}`", s.skeleton.dims, layout.name)));
            }
            let path = root.join(&s.skeleton.file);
            let len = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            if len != 4 * (m * c * t * v) as u64 {
                return Err(at(format!("{} has {len} bytes, dims imply {}", path.display(), 4 * m * c * t * v)));
            }
            if s.frames.is_empty() {
                return Err(at("no frames".into()));
            }
            if s.joints2d.len() != s.frames.len() {
                return Err(at(format!("{} frames but {} joints2d rows", s.frames.len(), s.joints2d.len())));
            }
            if s.joints2d.iter().any(|r| r.len() != self.informative_joints.len()) {
                return Err(at("joints2d rows must list every informative joint".into()));
            }
            for f in &s.frames {
                let p = root.join(f);
                if !p.is_file() {
                    return Err(at(format!("missing frame {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Raw little-endian `f32` array.
pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

pub fn write_f32_file(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One loaded clip: raw skeleton plus its ST-ROI mosaic.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub skeleton: SkeletonSequence<f32>,
    pub roi: StRoiImage,
}

/// Loaded clips sharing one joint layout.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: Arc<JointLayout>,
    pub class_names: Vec<String>,
    pub clips: Vec<Clip>,
}

impl Dataset {
    /// Validates and loads a manifest, building each clip's mosaic with `geom`.
    pub fn load(manifest_path: &Path, geom: RoiGeometry) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        manifest.validate(root)?;
        let layout = Arc::new(manifest.resolve_layout()?);
        let mut clips = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let data = read_f32_file(&root.join(&s.skeleton.file))?;
            let skeleton = SkeletonSequence::new(Tensor::from_vec(s.skeleton.dims, data), layout.clone())?;
            let frames = s.frames.iter().map(|f| RgbFrame::load_png(&root.join(f))).collect::<Result<Vec<_>>>()?;
            let roi = build_st_roi(&frames, &s.joints2d, geom)?;
            clips.push(Clip { id: s.id.clone(), label: s.label, split: s.split, skeleton, roi });
        }
        Ok(Self { layout, class_names: manifest.classes, clips })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Normalizes, resamples and selects joints for `model`, standardising
    /// mosaics with `stats` or with statistics of the training split.
    /// Clips whose hips degenerate are dropped with a warning.
    pub fn prepare<T: Scalar>(&self, model: &IPayModel<T>, stats: Option<ChannelStats>) -> Result<PreparedData<T>> {
        let cfg = &model.config.data;
        let stats = stats.unwrap_or_else(|| ChannelStats::from_images(self.split(Split::Train).map(|c| &c.roi)));
        let keep: Vec<usize> = model.layout.names.iter().map(|n| self.layout.index_of(n)).collect::<Option<_>>().ok_or_else(
            || Error::InvalidLayout(format!("model layout `{}` is not a subset of `{}`", model.layout.name, self.layout.name)),
        )?;
        let mut samples = Vec::with_capacity(self.clips.len());
        let mut dropped = Vec::new();
        for clip in &self.clips {
            let seq = match normalize_with(&clip.skeleton, cfg.align_mode) {
                Ok(n) => n.into_sequence(),
                Err(e @ Error::DegenerateHips { .. }) => {
                    warn!("dropping sample {}: {e}", clip.id);
                    dropped.push(clip.id.clone());
                    continue;
                }
                Err(e) => return Err(e),
            };
            let seq = resample_uniform(&seq, cfg.frames)?;
            let seq = if keep.len() == self.layout.num_joints() { seq } else { select_joints(&seq, &keep)? };
            let skeleton = SkeletonSequence::new(seq.tensor().cast::<T>(), model.layout.clone())?;
            let rgb = model.needs_rgb().then(|| clip.roi.to_tensor::<T>(&stats));
            samples.push(PreparedSample { id: clip.id.clone(), label: clip.label, split: clip.split, skeleton, rgb });
        }
        Ok(PreparedData { class_names: self.class_names.clone(), stats, samples, dropped })
    }
}

/// Model-ready sample: normalized skeleton and standardised mosaic.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub skeleton: SkeletonSequence<T>,
    /// `(3, H, W)`, present when the model has an RGB backbone.
    pub rgb: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct PreparedData<T> {
    pub class_names: Vec<String>,
    pub stats: ChannelStats,
    pub samples: Vec<PreparedSample<T>>,
    /// Ids of clips rejected during preparation.
    pub dropped: Vec<String>,
}

impl<T> PreparedData<T> {
    pub fn split(&self, split: Split) -> Vec<&PreparedSample<T>> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}
