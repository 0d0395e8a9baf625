//! Procedural payment clips: skeletons, rendered frames and 2-D hand tracks.
//!
//! World axes: `z` up; a standing payer faces `+y` with their right along `+x`.
//! Every clip is posed relative to a latent box anchor at the payer's
//! right-front. The anchor is used to script the hand and is drawn into the
//! frames, but it is never written to the manifest.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_f32_file, Clip, Dataset, DatasetManifest, SampleEntry, SkeletonFile, Split, CLASS_NAMES, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::image::RgbFrame;
use crate::rgb::{build_st_roi, RoiGeometry};
use crate::skeleton::{JointLayout, SkeletonSequence};
use crate::tensor::Tensor;
use crate::trainer::derive_seed;

pub const QR: usize = 0;
pub const CASH: usize = 1;
pub const EVADE: usize = 2;
pub const SWIPE: usize = 3;
pub const TAP: usize = 4;

/// Recorded sample counts per class of the reference benchmark (Others excluded).
pub const TABLE1_COUNTS: [usize; 5] = [124, 97, 37, 88, 145];

const SLUGS: [&str; 5] = ["qr", "cash", "evade", "swipe", "tap"];

/// Class counts for `total` samples in the reference proportions (largest remainder).
pub fn table1_counts(total: usize) -> [usize; 5] {
    let sum: usize = TABLE1_COUNTS.iter().sum();
    let mut counts = TABLE1_COUNTS.map(|c| c * total / sum);
    let mut rema: Vec<(usize, usize)> = TABLE1_COUNTS.iter().enumerate().map(|(i, &c)| (c * total % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - counts.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-coordinate Gaussian jitter, metres.
    pub jitter: f64,
    /// Per joint and frame probability of holding the previous value.
    pub dropout: f64,
}

impl NoiseConfig {
    pub const NONE: Self = Self { jitter: 0.0, dropout: 0.0 };
    pub const MODERATE: Self = Self { jitter: 0.01, dropout: 0.02 };
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub counts: [usize; 5],
    pub layout: JointLayout,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub frames_per_clip: usize,
    pub image_size: (usize, usize),
    pub train_fraction: f64,
}

impl SynthConfig {
    pub fn balanced(per_class: usize, seed: u64) -> Self {
        Self {
            counts: [per_class; 5],
            layout: JointLayout::test21(),
            noise: NoiseConfig::MODERATE,
            seed,
            frames_per_clip: 8,
            image_size: (320, 240),
            train_fraction: 0.7,
        }
    }

    pub fn table1(total: usize, seed: u64) -> Self {
        Self { counts: table1_counts(total), ..Self::balanced(0, seed) }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `(label, index within class)` of global sample `i`.
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (label, &c) in self.counts.iter().enumerate() {
            if i < c {
                return (label, i);
            }
            i -= c;
        }
        panic!("sample index out of range");
    }

    fn splits(&self) -> Vec<Vec<Split>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(label, &n)| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, label as u64, 0x5911)));
                let n_train = (n as f64 * self.train_fraction).round() as usize;
                let mut s = vec![Split::Test; n];
                for &i in &order[..n_train] {
                    s[i] = Split::Train;
                }
                s
            })
            .collect()
    }
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: V3) -> V3 {
    let n = norm(a);
    if n > 1e-12 { mul(a, 1.0 / n) } else { [0.0, 0.0, 1.0] }
}

fn lerp(a: V3, b: V3, u: f64) -> V3 {
    add(a, mul(sub(b, a), u))
}

/// Rigid placement of the body frame in the world: yaw about `z`, then offset.
#[derive(Clone, Copy, Debug)]
struct Placement {
    yaw: f64,
    offset: V3,
}

impl Placement {
    fn apply(&self, p: V3) -> V3 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [c * p[0] - s * p[1] + self.offset[0], s * p[0] + c * p[1] + self.offset[1], p[2] + self.offset[2]]
    }

    fn rotate(&self, p: V3) -> V3 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
    }
}

/// Keyframed 3-D track: `(frame, position, eased)`; `eased` shapes the
/// segment ending at that key with a cosine ramp instead of a straight line.
#[derive(Clone, Debug, Default)]
struct Track(Vec<(f64, V3, bool)>);

impl Track {
    fn start(p: V3) -> Self {
        Self(vec![(0.0, p, true)])
    }

    fn end(&self) -> (f64, V3) {
        let &(t, p, _) = self.0.last().unwrap();
        (t, p)
    }

    fn to(mut self, frames: f64, p: V3) -> Self {
        let t = self.end().0 + frames;
        self.0.push((t, p, true));
        self
    }

    fn linear(mut self, frames: f64, p: V3) -> Self {
        let t = self.end().0 + frames;
        self.0.push((t, p, false));
        self
    }

    fn hold(self, frames: f64) -> Self {
        let p = self.end().1;
        self.linear(frames, p)
    }

    fn at(&self, t: f64) -> V3 {
        let k = &self.0;
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((t0, p0, _), (t1, p1, eased)) = (w[0], w[1]);
            if t <= t1 {
                let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                let u = if eased { 0.5 - 0.5 * (PI * u).cos() } else { u };
                return lerp(p0, p1, u);
            }
        }
        k.last().unwrap().1
    }
}

/// Latent scene facts kept for tests and the label oracle.
#[derive(Clone, Debug)]
pub struct Latent {
    /// Box anchor, world coordinates.
    pub anchor: V3,
    /// Direction the box is swiped along, world coordinates.
    pub lateral: V3,
    /// `[first, last]` raw frames of a tap dwell.
    pub dwell: Option<(usize, usize)>,
    /// Noise-free right-hand track, world coordinates, one per raw frame.
    pub right_hand: Vec<V3>,
}

/// Pinhole camera looking at the payer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub position: V3,
    pub right: V3,
    pub down: V3,
    pub forward: V3,
    pub focal: f64,
    pub center: [f64; 2],
}

impl Camera {
    pub fn looking_at(position: V3, target: V3, focal: f64, size: (usize, usize)) -> Self {
        let forward = unit(sub(target, position));
        let right = unit(cross(forward, [0.0, 0.0, 1.0]));
        let down = cross(forward, right);
        Self { position, right, down, forward, focal, center: [size.0 as f64 / 2.0, size.1 as f64 / 2.0] }
    }

    /// Pixel `(x, y)` and depth of a world point.
    pub fn project(&self, p: V3) -> ([f64; 2], f64) {
        let d = sub(p, self.position);
        let z = dot(d, self.forward).max(1e-3);
        ([self.center[0] + self.focal * dot(d, self.right) / z, self.center[1] + self.focal * dot(d, self.down) / z], z)
    }
}

fn default_camera(size: (usize, usize)) -> Camera {
    Camera::looking_at([0.45, 2.1, 1.9], [0.15, 0.15, 1.0], 0.82 * size.0 as f64, size)
}

/// Named anatomical points of one frame, body frame.
struct Pose {
    points: BTreeMap<&'static str, V3>,
    /// Hand direction (wrist to hand) per side, for finger placement.
    hand_dir: [V3; 2],
}

const SIDES: [(&str, f64); 2] = [("left", -1.0), ("right", 1.0)];

/// Two-bone arm: places the elbow for a wrist target.
fn elbow(shoulder: V3, wrist: V3, upper: f64, fore: f64, side: f64) -> V3 {
    let d_vec = sub(wrist, shoulder);
    let d = norm(d_vec).clamp(1e-6, upper + fore - 1e-6);
    let u = unit(d_vec);
    let a = (upper * upper - fore * fore + d * d) / (2.0 * d);
    let h = (upper * upper - a * a).max(0.0).sqrt();
    let pole = [0.5 * side, -0.3, -1.0];
    let perp = unit(sub(pole, mul(u, dot(pole, u))));
    add(shoulder, add(mul(u, a), mul(perp, h)))
}

fn pose(scale: f64, hands: [V3; 2], gait: Option<f64>) -> Pose {
    let s = scale;
    let mut p = BTreeMap::new();
    let mut hand_dir = [[0.0; 3]; 2];
    p.insert("nose", [0.0, 0.08 * s, 1.62 * s]);
    p.insert("neck", [0.0, 0.0, 1.5 * s]);
    for (i, &(name, sx)) in SIDES.iter().enumerate() {
        let swing = gait.map_or(0.0, |phase| 0.2 * s * (phase + i as f64 * PI).sin());
        let lift = gait.map_or(0.0, |phase| 0.06 * s * (phase + i as f64 * PI).sin().max(0.0));
        let side = |k: &'static str, v: V3| (k, v);
        let shoulder = [0.19 * s * sx, 0.0, 1.45 * s];
        let hand = hands[i];
        let arm_dir = unit(sub(hand, shoulder));
        let wrist = sub(hand, mul(arm_dir, 0.08 * s));
        let elb = elbow(shoulder, wrist, 0.3 * s, 0.26 * s, sx);
        hand_dir[i] = unit(sub(hand, wrist));
        let knee = [0.1 * s * sx, 0.02 * s + 0.5 * swing, 0.5 * s + lift];
        let ankle = [0.1 * s * sx, swing, 0.08 * s + lift];
        let pts = [
            side("eye", [0.03 * s * sx, 0.07 * s, 1.66 * s]),
            side("ear", [0.07 * s * sx, 0.0, 1.64 * s]),
            side("shoulder", shoulder),
            side("acromion", add(shoulder, [0.03 * s * sx, 0.0, 0.03 * s])),
            side("elbow", elb),
            side("olecranon", add(elb, [0.0, -0.03 * s, 0.0])),
            side("cubital_fossa", add(elb, [0.0, 0.03 * s, 0.0])),
            side("wrist", wrist),
            side("hip", [0.1 * s * sx, 0.0, 0.95 * s]),
            side("knee", knee),
            side("ankle", ankle),
            side("big_toe", add(ankle, [0.01 * s * sx, 0.15 * s, -0.06 * s])),
            side("small_toe", add(ankle, [0.05 * s * sx, 0.13 * s, -0.06 * s])),
            side("heel", add(ankle, [0.0, -0.05 * s, -0.06 * s])),
        ];
        for (k, v) in pts {
            p.insert(leak(format!("{name}_{k}")), v);
        }
    }
    Pose { points: p, hand_dir }
}

/// Interned joint-name strings (a small fixed vocabulary).
fn leak(s: String) -> &'static str {
    use std::sync::Mutex;
    static NAMES: Mutex<Vec<&'static str>> = Mutex::new(Vec::new());
    let mut names = NAMES.lock().unwrap();
    if let Some(&n) = names.iter().find(|&&n| n == s) {
        return n;
    }
    let n: &'static str = Box::leak(s.into_boxed_str());
    names.push(n);
    n
}

const FINGER_SPREAD: [(&str, f64); 5] =
    [("thumb", -0.035), ("forefinger", -0.017), ("middle_finger", 0.0), ("ring_finger", 0.015), ("pinky_finger", 0.03)];

impl Pose {
    fn joint(&self, name: &str, scale: f64) -> Result<V3> {
        if let Some(&p) = self.points.get(name) {
            return Ok(p);
        }
        for (i, &(side, _)) in SIDES.iter().enumerate() {
            let Some(rest) = name.strip_prefix(side).and_then(|r| r.strip_prefix('_')) else { continue };
            for (finger, spread) in FINGER_SPREAD {
                let Some(seg) = rest.strip_prefix(finger) else { continue };
                let along = match seg {
                    "_third_joint" => 0.04,
                    "2" => 0.06,
                    "3" => 0.08,
                    "4" => 0.1,
                    _ => continue,
                };
                let wrist = self.points[leak(format!("{side}_wrist"))];
                let dir = self.hand_dir[i];
                let lateral = unit(cross(dir, [0.0, 0.0, 1.0]));
                let spread = if finger == "middle_finger" { 0.0 } else { spread };
                return Ok(add(wrist, add(mul(dir, along * scale), mul(lateral, spread * scale * (along / 0.08)))));
            }
        }
        Err(Error::InvalidLayout(format!("no synthetic position for joint `{name}`")))
    }
}

/// One generated clip with everything needed to write or use it in memory.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub skeleton: SkeletonSequence<f32>,
    /// Raw frame index of each rendered frame.
    pub frame_indices: Vec<usize>,
    pub frames: Vec<RgbFrame>,
    /// Projected informative joints (left hand, right hand) per rendered frame.
    pub joints2d: Vec<Vec<[f64; 2]>>,
    pub camera: Camera,
    pub latent: Latent,
}

struct Script {
    right: Track,
    left: Track,
    frames: usize,
    placement: Placement,
    /// Pelvis path (body frame offset per frame) and gait for walkers.
    walk: Option<(V3, V3)>,
    dwell: Option<(usize, usize)>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

fn frames(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> f64 {
    rng.random_range(lo..=hi) as f64
}

fn script(label: usize, s: f64, anchor: V3, rng: &mut ChaCha8Rng) -> Script {
    let rest_r = [0.22 * s, 0.02 * s, 0.8 * s];
    let rest_l = [-0.22 * s, 0.02 * s, 0.8 * s];
    let yaw = uniform(rng, -20.0, 20.0).to_radians();
    let offset = [uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), 0.0];
    let placement = Placement { yaw, offset };
    let idle = Track::start(rest_l);
    match label {
        QR => {
            let hold = add(anchor, [uniform(rng, -0.02, 0.02), uniform(rng, -0.08, -0.05), uniform(rng, 0.04, 0.08)]);
            let right = Track::start(rest_r)
                .hold(frames(rng, 10, 20))
                .to(frames(rng, 12, 20), hold)
                .hold(frames(rng, 10, 40))
                .to(frames(rng, 15, 25), rest_r)
                .hold(frames(rng, 5, 15));
            let n = right.end().0 as usize + 1;
            Script { right, left: idle, frames: n, placement, walk: None, dwell: None }
        }
        CASH => {
            let slot = add(anchor, [uniform(rng, -0.33, -0.27), uniform(rng, 0.02, 0.08), uniform(rng, -0.15, -0.09)]);
            let ready = add(slot, [0.0, -0.1, 0.0]);
            let mut right = Track::start(rest_r).hold(frames(rng, 10, 20)).hold(frames(rng, 20, 40)).to(frames(rng, 15, 20), ready);
            for _ in 0..rng.random_range(2..=4) {
                right = right.to(frames(rng, 6, 9), slot).to(frames(rng, 6, 9), ready);
            }
            let right = right.to(frames(rng, 15, 25), rest_r).hold(frames(rng, 5, 15));
            let n = right.end().0 as usize + 1;
            let chest = [-0.05 * s, 0.25 * s, 1.05 * s];
            let left = Track::start(rest_l).to(15.0, chest).hold((n as f64 - 45.0).max(1.0)).to(20.0, rest_l);
            Script { right, left, frames: n, placement, walk: None, dwell: None }
        }
        EVADE => {
            let n = rng.random_range(50..=80);
            let start = [-1.1 + uniform(rng, -0.1, 0.1), -0.55 + uniform(rng, -0.1, 0.1), 0.0];
            let end = [1.1 + uniform(rng, -0.1, 0.1), start[1] + uniform(rng, -0.1, 0.1), 0.0];
            let yaw = (end[1] - start[1]).atan2(end[0] - start[0]) - PI / 2.0 + uniform(rng, -0.2, 0.2);
            Script {
                right: Track::start(rest_r),
                left: idle,
                frames: n,
                placement: Placement { yaw, offset: start },
                walk: Some((start, end)),
                dwell: None,
            }
        }
        SWIPE => {
            let (dy, dz) = (uniform(rng, -0.015, 0.015), uniform(rng, -0.015, 0.015));
            let from = add(anchor, [-0.15 - uniform(rng, 0.0, 0.04), dy, dz]);
            let to = add(anchor, [0.15 + uniform(rng, 0.0, 0.04), dy, dz]);
            let right = Track::start(rest_r)
                .hold(frames(rng, 10, 20))
                .to(frames(rng, 12, 20), from)
                .linear(frames(rng, 8, 14), to)
                .to(frames(rng, 12, 20), rest_r)
                .hold(frames(rng, 5, 15));
            let n = right.end().0 as usize + 1;
            Script { right, left: idle, frames: n, placement, walk: None, dwell: None }
        }
        TAP => {
            let approach = Track::start(rest_r).hold(frames(rng, 10, 20)).to(frames(rng, 12, 20), anchor);
            let first = approach.end().0 as usize;
            let dwell = rng.random_range(6..=12);
            let right = approach.hold((dwell - 1) as f64).to(frames(rng, 12, 20), rest_r).hold(frames(rng, 5, 15));
            let n = right.end().0 as usize + 1;
            Script { right, left: idle, frames: n, placement, walk: None, dwell: Some((first, first + dwell - 1)) }
        }
        _ => unreachable!("label checked by caller"),
    }
}

fn class_yaw(label: usize, p: Placement) -> Placement {
    if label == CASH {
        Placement { yaw: p.yaw * 0.25, ..p }
    } else {
        p
    }
}

struct Painter<'a> {
    frame: &'a mut RgbFrame,
}

impl Painter<'_> {
    fn disc(&mut self, c: [f64; 2], r: f64, rgb: [u8; 3]) {
        let (w, h) = (self.frame.width() as i64, self.frame.height() as i64);
        let (x0, x1) = (((c[0] - r).floor() as i64).max(0), ((c[0] + r).ceil() as i64).min(w - 1));
        let (y0, y1) = (((c[1] - r).floor() as i64).max(0), ((c[1] + r).ceil() as i64).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1]);
                if dx * dx + dy * dy <= r * r {
                    self.frame.put(x as usize, y as usize, rgb);
                }
            }
        }
    }

    fn rect(&mut self, c: [f64; 2], half: [f64; 2], rgb: [u8; 3]) {
        let (w, h) = (self.frame.width() as i64, self.frame.height() as i64);
        let x0 = ((c[0] - half[0]).round() as i64).max(0);
        let x1 = ((c[0] + half[0]).round() as i64).min(w - 1);
        let y0 = ((c[1] - half[1]).round() as i64).max(0);
        let y1 = ((c[1] + half[1]).round() as i64).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.frame.put(x as usize, y as usize, rgb);
            }
        }
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], r: f64, rgb: [u8; 3]) {
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = (len / (r * 0.5).max(0.5)).ceil() as usize + 1;
        for i in 0..=steps {
            let u = i as f64 / steps as f64;
            self.disc([a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u], r, rgb);
        }
    }
}

fn background(size: (usize, usize), rng: &mut ChaCha8Rng) -> RgbFrame {
    let base: [i32; 3] = std::array::from_fn(|_| rng.random_range(90..=160));
    let block = 16;
    let (bw, bh) = (size.0.div_ceil(block), size.1.div_ceil(block));
    let tiles: Vec<[u8; 3]> = (0..bw * bh)
        .map(|_| std::array::from_fn(|c| (base[c] + rng.random_range(-20..=20)).clamp(0, 255) as u8))
        .collect();
    let mut f = RgbFrame::filled(size.0, size.1, [0, 0, 0]);
    for y in 0..size.1 {
        for x in 0..size.0 {
            f.put(x, y, tiles[(y / block) * bw + x / block]);
        }
    }
    f
}

const BOX_RGB: [u8; 3] = [30, 60, 170];
const SKIN_RGB: [u8; 3] = [225, 175, 135];

fn prop(label: usize) -> Option<([f64; 2], [u8; 3])> {
    match label {
        QR => Some(([0.025, 0.04], [25, 25, 25])),
        CASH => Some(([0.04, 0.022], [100, 170, 90])),
        SWIPE | TAP => Some(([0.028, 0.018], [238, 238, 238])),
        _ => None,
    }
}

/// Generates sample `index` of `cfg` (global order: class by class).
pub fn generate_sample(cfg: &SynthConfig, index: usize, split: Split) -> Result<SynthSample> {
    let (label, k) = cfg.locate(index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64, 0x5e));
    let scale = uniform(&mut rng, 0.9, 1.1);
    let anchor_body = [0.33 * scale + uniform(&mut rng, -0.04, 0.04), 0.35 * scale + uniform(&mut rng, -0.04, 0.04), 1.1 * scale + uniform(&mut rng, -0.04, 0.04)];
    let sc = script(label, scale, anchor_body, &mut rng);
    let placement = class_yaw(label, sc.placement);
    let payer = Placement { yaw: uniform(&mut rng, -0.3, 0.3), offset: [0.0; 3] };
    // Walkers pass a box placed for a standing payer; everyone else is posed around the box.
    let (anchor, lateral) = if sc.walk.is_some() {
        (payer.apply(anchor_body), payer.rotate([1.0, 0.0, 0.0]))
    } else {
        (placement.apply(anchor_body), placement.rotate([1.0, 0.0, 0.0]))
    };

    let layout = Arc::new(cfg.layout.clone());
    let v = layout.num_joints();
    let t_len = sc.frames;
    let mut clean = vec![[0.0; 3]; t_len * v];
    let mut hands_world = Vec::with_capacity(t_len);
    let mut elbows_world = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let tf = t as f64;
        let (place, gait, hand_r, hand_l) = match sc.walk {
            Some((start, end)) => {
                let u = tf / (t_len - 1).max(1) as f64;
                let phase = 2.0 * PI * tf / 18.0;
                let p = Placement { offset: lerp(start, end, u), ..placement };
                let swing = 0.12 * scale * phase.sin();
                let r = add(sc.right.at(0.0), [0.0, -swing, 0.0]);
                let l = add(sc.left.at(0.0), [0.0, swing, 0.0]);
                (p, Some(phase), r, l)
            }
            None => (placement, None, sc.right.at(tf), sc.left.at(tf)),
        };
        let body = pose(scale, [hand_l, hand_r], gait);
        for (j, name) in layout.names.iter().enumerate() {
            clean[t * v + j] = place.apply(body.joint(name, scale)?);
        }
        hands_world.push([place.apply(hand_l), place.apply(hand_r)]);
        elbows_world.push([place.apply(body.points["left_elbow"]), place.apply(body.points["right_elbow"])]);
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64, 0x7a));
    let jitter = Normal::new(0.0, cfg.noise.jitter.max(0.0)).expect("valid std");
    let mut noisy = clean.clone();
    for t in 0..t_len {
        for j in 0..v {
            let drop = t > 0 && cfg.noise.dropout > 0.0 && noise_rng.random::<f64>() < cfg.noise.dropout;
            noisy[t * v + j] = if drop {
                noisy[(t - 1) * v + j]
            } else if cfg.noise.jitter > 0.0 {
                std::array::from_fn(|c| clean[t * v + j][c] + jitter.sample(&mut noise_rng))
            } else {
                clean[t * v + j]
            };
        }
    }
    let mut data = vec![0f32; 3 * t_len * v];
    for t in 0..t_len {
        for j in 0..v {
            for c in 0..3 {
                data[(c * t_len + t) * v + j] = noisy[t * v + j][c] as f32;
            }
        }
    }
    let skeleton = SkeletonSequence::new(Tensor::from_vec([1, 3, t_len, v], data), layout.clone())?;

    let camera = default_camera(cfg.image_size);
    let frame_indices = crate::rgb::sample_frames(t_len, cfg.frames_per_clip);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64, 0xb9));
    let bg = background(cfg.image_size, &mut bg_rng);
    let sleeve: [u8; 3] = std::array::from_fn(|_| bg_rng.random_range(40..=200));
    let (lh, rh) = (layout.left_hand, layout.right_hand);
    let mut frames = Vec::with_capacity(frame_indices.len());
    let mut joints2d = Vec::with_capacity(frame_indices.len());
    for &t in &frame_indices {
        let mut frame = bg.clone();
        let mut paint = Painter { frame: &mut frame };
        let px = |p: V3, m: f64| {
            let (uv, z) = camera.project(p);
            (uv, camera.focal * m / z)
        };
        let (b, br) = px(anchor, 0.05);
        paint.disc(b, br, BOX_RGB);
        for side in 0..2 {
            let (e, _) = px(elbows_world[t][side], 0.0);
            let (hnd, hr) = px(hands_world[t][side], 0.035);
            paint.segment(e, hnd, hr * 0.7, sleeve);
            paint.disc(hnd, hr, SKIN_RGB);
            let holds = side == 1 || label == CASH;
            if let (true, Some((half, rgb))) = (holds, prop(label)) {
                let (_, unit_px) = px(hands_world[t][side], 1.0);
                paint.rect([hnd[0], hnd[1] - 0.02 * unit_px], [half[0] * unit_px, half[1] * unit_px], rgb);
            }
        }
        frames.push(frame);
        let p = |j: usize| {
            let q = skeleton.point(0, t, j).map(|x| x as f64);
            camera.project(q).0
        };
        joints2d.push(vec![p(lh), p(rh)]);
    }
    let right_hand = hands_world.iter().map(|h| h[1]).collect();
    Ok(SynthSample {
        id: format!("{}_{k:04}", SLUGS[label]),
        label,
        split,
        skeleton,
        frame_indices,
        frames,
        joints2d,
        camera,
        latent: Latent { anchor, lateral, dwell: sc.dwell, right_hand },
    })
}

fn all_samples<F, R>(cfg: &SynthConfig, f: F) -> Result<Vec<R>>
where
    F: Fn(SynthSample) -> Result<R> + Sync,
    R: Send,
{
    if cfg.counts.iter().sum::<usize>() == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    let splits = cfg.splits();
    (0..cfg.total())
        .into_par_iter()
        .map(|i| {
            let (label, k) = cfg.locate(i);
            f(generate_sample(cfg, i, splits[label][k])?)
        })
        .collect()
}

/// Writes skeletons, frames and `manifest.json` under `out`.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let io = |p: &Path, e| Error::io(p, e);
    std::fs::create_dir_all(out.join("skeletons")).map_err(|e| io(out, e))?;
    std::fs::create_dir_all(out.join("frames")).map_err(|e| io(out, e))?;
    let samples = all_samples(cfg, |s| {
        let skel_rel = Path::new("skeletons").join(format!("{}.bin", s.id));
        write_f32_file(&out.join(&skel_rel), s.skeleton.tensor().data())?;
        let dir = Path::new("frames").join(&s.id);
        std::fs::create_dir_all(out.join(&dir)).map_err(|e| io(&out.join(&dir), e))?;
        let mut frames = Vec::with_capacity(s.frames.len());
        for (i, f) in s.frames.iter().enumerate() {
            let rel = dir.join(format!("{i:02}.png"));
            f.save_png(&out.join(&rel))?;
            frames.push(rel);
        }
        let dims = s.skeleton.tensor().shape();
        Ok(SampleEntry {
            id: s.id,
            label: s.label,
            split: s.split,
            skeleton: SkeletonFile { file: skel_rel, dims: [dims[0], dims[1], dims[2], dims[3]] },
            frames,
            joints2d: s.joints2d,
            camera: Some(serde_json::to_value(s.camera)?),
        })
    })?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        layout: cfg.layout.name.clone(),
        layout_def: JointLayout::builtin(&cfg.layout.name).is_none().then(|| cfg.layout.clone()),
        classes: CLASS_NAMES.map(String::from).to_vec(),
        informative_joints: vec![
            cfg.layout.names[cfg.layout.left_hand].clone(),
            cfg.layout.names[cfg.layout.right_hand].clone(),
        ],
        samples,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Same clips as [`generate_dataset`], kept in memory with mosaics built by `geom`.
pub fn generate_in_memory(cfg: &SynthConfig, geom: RoiGeometry) -> Result<Dataset> {
    let clips = all_samples(cfg, |s| {
        let roi = build_st_roi(&s.frames, &s.joints2d, geom)?;
        Ok(Clip { id: s.id, label: s.label, split: s.split, skeleton: s.skeleton, roi })
    })?;
    Ok(Dataset { layout: Arc::new(cfg.layout.clone()), class_names: CLASS_NAMES.map(String::from).to_vec(), clips })
}

/// Rule-based label from the latent anchor: how close the right hand gets,
/// and how far it slides sideways while in contact.
pub fn oracle_label(latent: &Latent) -> usize {
    let r: Vec<f64> = latent.right_hand.iter().map(|&h| norm(sub(h, latent.anchor))).collect();
    let min_r = r.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_r < 0.055 {
        let lateral: Vec<f64> = latent
            .right_hand
            .iter()
            .zip(&r)
            .filter(|(_, &ri)| ri < 0.1)
            .map(|(&h, _)| dot(sub(h, latent.anchor), latent.lateral))
            .collect();
        let range = lateral.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - lateral.iter().cloned().fold(f64::INFINITY, f64::min);
        if range > 0.08 { SWIPE } else { TAP }
    } else if min_r < 0.22 {
        QR
    } else if min_r < 0.5 {
        CASH
    } else {
        EVADE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_total_500() {
        let c = table1_counts(500);
        assert_eq!(c.iter().sum::<usize>(), 500);
        assert_eq!(c, [126, 99, 38, 89, 148]);
        assert_eq!(table1_counts(491), TABLE1_COUNTS);
    }

    #[test]
    fn tracks_interpolate() {
        let t = Track::start([0.0; 3]).linear(10.0, [1.0, 0.0, 0.0]).hold(5.0).to(10.0, [0.0; 3]);
        assert_eq!(t.at(5.0), [0.5, 0.0, 0.0]);
        assert_eq!(t.at(12.0), [1.0, 0.0, 0.0]);
        assert!((t.at(20.0)[0] - 0.5).abs() < 1e-12);
        assert_eq!(t.at(100.0), [0.0; 3]);
    }

    #[test]
    fn camera_centre_projects_to_centre() {
        let cam = Camera::looking_at([0.0, 2.0, 1.0], [0.0, 0.0, 1.0], 100.0, (320, 240));
        let (uv, z) = cam.project([0.0, 0.0, 1.0]);
        assert!((uv[0] - 160.0).abs() < 1e-9 && (uv[1] - 120.0).abs() < 1e-9 && (z - 2.0).abs() < 1e-9);
        let (up, _) = cam.project([0.0, 0.0, 1.5]);
        assert!(up[1] < 120.0);
    }
}
