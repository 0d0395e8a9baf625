//! Spatiotemporal region-of-interest mosaics and the RGB expert stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::{RgbBackboneKind, RgbConfig, RoiConfig};
use crate::error::{Error, Result};
use crate::flops::LayerSpec;
use crate::image::RgbFrame;
use crate::nn::{Conv, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Crop and mosaic geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiGeometry {
    /// Frames sampled per clip (`L`).
    pub frames: usize,
    pub box_size: usize,
    pub box_out: usize,
}

impl From<&RoiConfig> for RoiGeometry {
    fn from(c: &RoiConfig) -> Self {
        Self { frames: c.frames, box_size: c.box_size, box_out: c.box_out }
    }
}

/// Mosaic of hand crops: one column block per sampled frame, one row block per joint.
///
/// Pixels are interleaved RGB in `[0, 1]`, shape `H × (W·L) × 3` with
/// `H = J·box_out` and `W = box_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct StRoiImage {
    height: usize,
    block_width: usize,
    frames: usize,
    pixels: Vec<f32>,
}

impl StRoiImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.block_width * self.frames
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn block_width(&self) -> usize {
        self.block_width
    }

    /// First column of block `i`.
    pub fn column_offset(&self, i: usize) -> usize {
        i * self.block_width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width() + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Pixels of column block `i` as `height × block_width × 3`.
    pub fn block(&self, i: usize) -> Vec<f32> {
        let w = self.width();
        let x0 = self.column_offset(i);
        (0..self.height)
            .flat_map(|y| self.pixels[(y * w + x0) * 3..(y * w + x0 + self.block_width) * 3].iter().copied())
            .collect()
    }

    pub fn to_frame(&self) -> RgbFrame {
        let data = self.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbFrame::new(self.width(), self.height, data)
    }

    /// Channel-first `(3, H, W)` tensor standardised with per-channel statistics.
    pub fn to_tensor<T: Scalar>(&self, stats: &ChannelStats) -> Tensor<T> {
        let (h, w) = (self.height, self.width());
        let mut out = Tensor::zeros([3, h, w]);
        let od = out.data_mut();
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                od[c * h * w + i] = T::of((px[c] as f64 - stats.mean[c]) / stats.std[c]);
            }
        }
        out
    }
}

/// Per-channel pixel mean and standard deviation over a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl ChannelStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a StRoiImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.pixels.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n as f64);
        let std = std::array::from_fn(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3));
        Self { mean, std }
    }
}

/// Square crop of side `size` centred on `(cx, cy)`, clipped at the image
/// border with edge replication. Output is `size × size × 3` in `[0, 1]`.
fn crop(frame: &RgbFrame, cx: f64, cy: f64, size: usize) -> Vec<f32> {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let cx = (cx.round() as i64).clamp(0, w - 1);
    let cy = (cy.round() as i64).clamp(0, h - 1);
    let x0 = cx - size as i64 / 2;
    let y0 = cy - size as i64 / 2;
    let mut out = Vec::with_capacity(size * size * 3);
    for i in 0..size as i64 {
        let y = (y0 + i).clamp(0, h - 1) as usize;
        for j in 0..size as i64 {
            let x = (x0 + j).clamp(0, w - 1) as usize;
            out.extend(frame.pixel(x, y).map(|v| v as f32 / 255.0));
        }
    }
    out
}

/// Bilinear resize of a square `n × n × 3` patch to `m × m × 3` (half-pixel centres).
fn resize(src: &[f32], n: usize, m: usize) -> Vec<f32> {
    if n == m {
        return src.to_vec();
    }
    let coord = |p: usize| {
        let s = ((p as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = s.floor() as usize;
        (i, (i + 1).min(n - 1), (s - i as f64) as f32)
    };
    let mut out = Vec::with_capacity(m * m * 3);
    for py in 0..m {
        let (y0, y1, fy) = coord(py);
        for px in 0..m {
            let (x0, x1, fx) = coord(px);
            for c in 0..3 {
                let at = |y: usize, x: usize| src[(y * n + x) * 3 + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Indices of `l` frames sampled uniformly from `f`.
pub fn sample_frames(f: usize, l: usize) -> Vec<usize> {
    (0..l).map(|i| i * f / l).collect()
}

/// Builds the ST-ROI mosaic for one clip.
///
/// `joints2d[t]` holds the `(x, y)` pixel positions of the informative joints
/// in frame `t`; every frame must list the same number of joints.
pub fn build_st_roi(frames: &[RgbFrame], joints2d: &[Vec<[f64; 2]>], geom: RoiGeometry) -> Result<StRoiImage> {
    if frames.is_empty() {
        return Err(Error::EmptyClip);
    }
    if joints2d.len() != frames.len() {
        return Err(Error::shape(format!("{} frames but {} joint rows", frames.len(), joints2d.len())));
    }
    let j = joints2d[0].len();
    if j == 0 || joints2d.iter().any(|r| r.len() != j) {
        return Err(Error::shape("informative joints must be a nonempty list of equal length per frame"));
    }
    let b = geom.box_out;
    let (height, width) = (j * b, b * geom.frames);
    let mut pixels = vec![0f32; height * width * 3];
    for (li, &fi) in sample_frames(frames.len(), geom.frames).iter().enumerate() {
        for (ji, &[x, y]) in joints2d[fi].iter().enumerate() {
            let patch = resize(&crop(&frames[fi], x, y, geom.box_size), geom.box_size, b);
            for r in 0..b {
                let dst = ((ji * b + r) * width + li * b) * 3;
                pixels[dst..dst + b * 3].copy_from_slice(&patch[r * b * 3..(r + 1) * b * 3]);
            }
        }
    }
    Ok(StRoiImage { height, block_width: b, frames: geom.frames, pixels })
}

/// Pluggable image feature extractor over `(N, 3, H, W)` inputs.
pub trait RgbBackbone<T: Scalar>: Send + Sync {
    /// Returns `(N, C_r, H_r, W_r)`.
    fn forward(&self, tape: &mut Tape<'_, T>, x: Var) -> Var;
    fn out_channels(&self) -> usize;
    fn out_size(&self, h: usize, w: usize) -> (usize, usize);
    fn layer_specs(&self, h: usize, w: usize) -> Vec<LayerSpec>;
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl BasicBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), c_in, c_out, (3, 3), (stride, stride), (1, 1), rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), c_out, c_out, (3, 3), (1, 1), (1, 1), rng);
        let shortcut = (c_in != c_out || stride != 1)
            .then(|| Conv::new(store, &format!("{name}.shortcut"), c_in, c_out, (1, 1), (stride, stride), (0, 0), rng));
        Self { conv1, conv2, shortcut }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(tape, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h);
        let s = match &self.shortcut {
            Some(c) => c.forward(tape, x),
            None => x,
        };
        let y = tape.add(h, s);
        tape.relu(y)
    }

    fn specs(&self, h: usize, w: usize, out: &mut Vec<LayerSpec>) -> (usize, usize) {
        out.push(self.conv1.spec(h, w));
        let (ho, wo) = self.conv1.out_size(h, w);
        out.push(self.conv2.spec(ho, wo));
        if let Some(s) = &self.shortcut {
            out.push(s.spec(h, w));
        }
        (ho, wo)
    }
}

/// Residual CNN: strided stem, optional max pool, then residual stages.
#[derive(Clone, Debug)]
pub struct ResidualCnn {
    stem: Conv,
    pool: bool,
    blocks: Vec<BasicBlock>,
}

impl ResidualCnn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &RgbConfig, rng: &mut R) -> Self {
        let resnet = cfg.backbone == RgbBackboneKind::Resnet18;
        let stem = if resnet {
            Conv::new(store, &format!("{prefix}.stem"), 3, cfg.stem_width, (7, 7), (2, 2), (3, 3), rng)
        } else {
            Conv::new(store, &format!("{prefix}.stem"), 3, cfg.stem_width, (3, 3), (2, 2), (1, 1), rng)
        };
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_width;
        for (s, &c_out) in cfg.widths.iter().enumerate() {
            let (count, stride) = if resnet { (2, if s == 0 { 1 } else { 2 }) } else { (1, 2) };
            for b in 0..count {
                let name = format!("{prefix}.stage{s}.block{b}");
                blocks.push(BasicBlock::new(store, &name, c_in, c_out, if b == 0 { stride } else { 1 }, rng));
                c_in = c_out;
            }
        }
        Self { stem, pool: resnet, blocks }
    }
}

fn pool_size(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

impl<T: Scalar> RgbBackbone<T> for ResidualCnn {
    fn forward(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.stem.forward(tape, x);
        let mut h = tape.relu(h);
        if self.pool {
            h = tape.max_pool2d(h, 3, 2, 1);
        }
        for b in &self.blocks {
            h = b.forward(tape, h);
        }
        h
    }

    fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.c_out, |b| b.conv2.c_out)
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let mut specs = Vec::new();
        self.layer_specs_into(h, w, &mut specs)
    }

    fn layer_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        self.layer_specs_into(h, w, &mut specs);
        specs
    }
}

impl ResidualCnn {
    fn layer_specs_into(&self, h: usize, w: usize, out: &mut Vec<LayerSpec>) -> (usize, usize) {
        out.push(self.stem.spec(h, w));
        let (mut h, mut w) = self.stem.out_size(h, w);
        if self.pool {
            (h, w) = (pool_size(h), pool_size(w));
        }
        for b in &self.blocks {
            (h, w) = b.specs(h, w, out);
        }
        (h, w)
    }
}

/// Outputs of the RGB stream for a batch.
#[derive(Clone, Copy, Debug)]
pub struct RgbOutput {
    /// `(N, C_r, H_r, W_r)`.
    pub features: Var,
    pub logits: Option<Var>,
}

/// RGB expert: CNN backbone, global average pool, linear head.
pub struct RgbStream<T> {
    pub backbone: Box<dyn RgbBackbone<T>>,
    pub head: Option<Linear>,
}

impl<T: Scalar> RgbStream<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &RgbConfig, num_classes: usize, with_head: bool, rng: &mut R) -> Self {
        let backbone = ResidualCnn::new(store, "rgb", cfg, rng);
        let c = <ResidualCnn as RgbBackbone<T>>::out_channels(&backbone);
        let head = with_head.then(|| Linear::new(store, "rgb.head", c, num_classes, (1.0 / c as f64).sqrt(), rng));
        Self { backbone: Box::new(backbone), head }
    }

    /// `x` is a standardised `(N, 3, H, W)` batch of mosaics.
    pub fn forward(&self, tape: &mut Tape<'_, T>, x: &Tensor<T>) -> Result<RgbOutput> {
        if x.ndim() != 4 || x.shape()[1] != 3 {
            return Err(Error::shape(format!("rgb batch must be (N, 3, H, W), got {:?}", x.shape())));
        }
        let input = tape.constant(x.clone());
        let features = self.backbone.forward(tape, input);
        let logits = self.head.as_ref().map(|head| {
            let pooled = tape.mean(features, &[2, 3]);
            head.forward(tape, pooled)
        });
        Ok(RgbOutput { features, logits })
    }

    pub fn layer_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let mut specs = self.backbone.layer_specs(h, w);
        if let Some(head) = &self.head {
            specs.push(head.spec(1));
        }
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(w: usize, h: usize) -> RgbFrame {
        let mut f = RgbFrame::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                f.put(x, y, [x as u8, y as u8, (x + y) as u8]);
            }
        }
        f
    }

    #[test]
    fn central_crop_without_resize() {
        let f = gradient_frame(40, 30);
        let g = RoiGeometry { frames: 1, box_size: 10, box_out: 10 };
        let roi = build_st_roi(&[f.clone()], &[vec![[20.0, 15.0]]], g).unwrap();
        assert_eq!((roi.height(), roi.width()), (10, 10));
        for i in 0..10 {
            for j in 0..10 {
                let p = f.pixel(15 + j, 10 + i).map(|v| v as f32 / 255.0);
                assert_eq!(roi.pixel(i, j), p);
            }
        }
    }

    #[test]
    fn mosaic_shape_two_joints_eight_frames() {
        let frames = vec![gradient_frame(100, 80); 20];
        let joints = vec![vec![[30.0, 40.0], [70.0, 40.0]]; 20];
        let roi = build_st_roi(&frames, &joints, RoiGeometry { frames: 8, box_size: 64, box_out: 56 }).unwrap();
        assert_eq!((roi.height(), roi.width()), (112, 448));
        assert_eq!(roi.pixels().len(), 112 * 448 * 3);
    }

    #[test]
    fn corner_joint_is_edge_replicated() {
        let f = gradient_frame(60, 60);
        let roi = build_st_roi(&[f.clone()], &[vec![[0.0, 0.0]]], RoiGeometry { frames: 1, box_size: 40, box_out: 40 }).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                let (y, x) = (i.max(20) - 20, j.max(20) - 20);
                assert_eq!(roi.pixel(i, j), f.pixel(x, y).map(|v| v as f32 / 255.0));
            }
        }
    }

    #[test]
    fn empty_clip_and_uniform_sampling() {
        let g = RoiGeometry { frames: 8, box_size: 4, box_out: 4 };
        assert!(matches!(build_st_roi(&[], &[], g), Err(Error::EmptyClip)));
        assert_eq!(sample_frames(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(sample_frames(3, 8), vec![0, 0, 0, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn resize_constant_is_constant() {
        let src = vec![0.25f32; 7 * 7 * 3];
        assert!(resize(&src, 7, 3).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
