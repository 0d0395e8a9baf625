//! Skeleton clips: joint layouts, pelvis/hip normalization, temporal
//! resampling, augmentation and joint selection.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hip distances at or below this are treated as degenerate.
pub const HIP_EPS: f64 = 1e-6;

/// Named joint layout with the anatomical tree and the joints the model relies on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointLayout {
    pub name: String,
    pub names: Vec<String>,
    pub left_hip: usize,
    pub right_hip: usize,
    pub left_hand: usize,
    pub right_hand: usize,
    pub lower_body: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

const TEST21_NAMES: [&str; 21] = [
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_big_toe",
    "left_small_toe",
    "left_heel",
    "right_big_toe",
    "right_small_toe",
    "right_heel",
    "left_wrist",
    "right_wrist",
    "left_middle_finger3",
    "right_middle_finger3",
];

const TEST21_EDGES: [(&str, &str); 20] = [
    ("nose", "left_shoulder"),
    ("left_shoulder", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("left_wrist", "left_middle_finger3"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("right_wrist", "right_middle_finger3"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("left_ankle", "left_heel"),
    ("left_ankle", "left_big_toe"),
    ("left_ankle", "left_small_toe"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
    ("right_ankle", "right_heel"),
    ("right_ankle", "right_big_toe"),
    ("right_ankle", "right_small_toe"),
];

const LOWER_BODY: [&str; 10] = [
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_big_toe",
    "left_small_toe",
    "left_heel",
    "right_big_toe",
    "right_small_toe",
    "right_heel",
];

const FINGERS: [&str; 5] = ["thumb", "forefinger", "middle_finger", "ring_finger", "pinky_finger"];

fn mhr70_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "nose",
        "left_eye",
        "right_eye",
        "left_ear",
        "right_ear",
        "left_shoulder",
        "right_shoulder",
        "left_elbow",
        "right_elbow",
        "left_hip",
        "right_hip",
        "left_knee",
        "right_knee",
        "left_ankle",
        "right_ankle",
        "left_big_toe",
        "left_small_toe",
        "left_heel",
        "right_big_toe",
        "right_small_toe",
        "right_heel",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for side in ["right", "left"] {
        for f in FINGERS {
            for seg in ["4", "3", "2", "_third_joint"] {
                names.push(format!("{side}_{f}{seg}"));
            }
        }
        names.push(format!("{side}_wrist"));
    }
    for n in [
        "left_olecranon",
        "right_olecranon",
        "left_cubital_fossa",
        "right_cubital_fossa",
        "left_acromion",
        "right_acromion",
        "neck",
    ] {
        names.push(n.to_string());
    }
    names
}

fn mhr70_edges() -> Vec<(String, String)> {
    let mut e: Vec<(String, String)> = Vec::new();
    let mut add = |a: &str, b: &str| e.push((a.to_string(), b.to_string()));
    add("nose", "neck");
    add("left_eye", "nose");
    add("right_eye", "nose");
    add("left_ear", "left_eye");
    add("right_ear", "right_eye");
    for s in ["left", "right"] {
        add("neck", &format!("{s}_shoulder"));
        add(&format!("{s}_shoulder"), &format!("{s}_acromion"));
        add(&format!("{s}_shoulder"), &format!("{s}_elbow"));
        add(&format!("{s}_elbow"), &format!("{s}_olecranon"));
        add(&format!("{s}_elbow"), &format!("{s}_cubital_fossa"));
        add(&format!("{s}_elbow"), &format!("{s}_wrist"));
        add("neck", &format!("{s}_hip"));
        add(&format!("{s}_hip"), &format!("{s}_knee"));
        add(&format!("{s}_knee"), &format!("{s}_ankle"));
        add(&format!("{s}_ankle"), &format!("{s}_big_toe"));
        add(&format!("{s}_ankle"), &format!("{s}_small_toe"));
        add(&format!("{s}_ankle"), &format!("{s}_heel"));
        for f in FINGERS {
            add(&format!("{s}_wrist"), &format!("{s}_{f}_third_joint"));
            add(&format!("{s}_{f}_third_joint"), &format!("{s}_{f}2"));
            add(&format!("{s}_{f}2"), &format!("{s}_{f}3"));
            add(&format!("{s}_{f}3"), &format!("{s}_{f}4"));
        }
    }
    e
}

impl JointLayout {
    /// Builds a layout from joint names and name-keyed edges, locating the
    /// required joints by their conventional names.
    pub fn from_names(name: &str, names: Vec<String>, edges: &[(String, String)], lower: &[&str]) -> Result<Self> {
        let idx = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::InvalidLayout(format!("layout `{name}` has no joint `{n}`")))
        };
        let edges = edges.iter().map(|(a, b)| Ok((idx(a)?, idx(b)?))).collect::<Result<Vec<_>>>()?;
        let lower_body = lower.iter().map(|n| idx(n)).collect::<Result<Vec<_>>>()?;
        let layout = Self {
            name: name.to_string(),
            left_hip: idx("left_hip")?,
            right_hip: idx("right_hip")?,
            left_hand: idx("left_middle_finger3")?,
            right_hand: idx("right_middle_finger3")?,
            names,
            lower_body,
            edges,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Compact 21-joint layout with the same required joints as MHR70.
    pub fn test21() -> Self {
        let names = TEST21_NAMES.iter().map(|s| s.to_string()).collect();
        let edges: Vec<_> = TEST21_EDGES.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        Self::from_names("test21", names, &edges, &LOWER_BODY).expect("built-in layout is valid")
    }

    /// 70-joint body + hands layout in MHR70 joint order.
    pub fn mhr70() -> Self {
        Self::from_names("mhr70", mhr70_names(), &mhr70_edges(), &LOWER_BODY).expect("built-in layout is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "test21" => Some(Self::test21()),
            "mhr70" => Some(Self::mhr70()),
            _ => None,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `[left_hip, right_hip, left_hand, right_hand]`.
    pub fn required(&self) -> [usize; 4] {
        [self.left_hip, self.right_hip, self.left_hand, self.right_hand]
    }

    /// All joints not in `lower_body`, ascending.
    pub fn upper_body(&self) -> Vec<usize> {
        (0..self.num_joints()).filter(|i| !self.lower_body.contains(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_joints();
        let bad = |m: String| Err(Error::InvalidLayout(format!("{}: {m}", self.name)));
        let req = self.required();
        for (i, &a) in req.iter().enumerate() {
            if a >= v {
                return bad(format!("required joint index {a} >= {v}"));
            }
            if req[..i].contains(&a) {
                return bad("required joints must be distinct".into());
            }
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= v || b >= v {
                return bad(format!("edge ({a}, {b}) references a joint >= {v}"));
            }
            if a == b {
                return bad(format!("self edge on joint {a}"));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return bad(format!("duplicate edge ({a}, {b})"));
            }
        }
        if let Some(&j) = self.lower_body.iter().find(|&&j| j >= v) {
            return bad(format!("lower-body joint {j} >= {v}"));
        }
        Ok(())
    }
}

/// Skeleton clip `(M persons, 3, T frames, V joints)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence<T> {
    data: Tensor<T>,
    layout: Arc<JointLayout>,
}

impl<T: Scalar> SkeletonSequence<T> {
    pub fn new(data: Tensor<T>, layout: Arc<JointLayout>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("skeleton must be (M, 3, T, V), got {s:?}")));
        }
        if s[2] == 0 {
            return Err(Error::EmptySequence);
        }
        if s[0] == 0 {
            return Err(Error::shape("skeleton needs at least one person"));
        }
        if s[3] != layout.num_joints() {
            return Err(Error::shape(format!("skeleton has {} joints, layout `{}` has {}", s[3], layout.name, layout.num_joints())));
        }
        if !data.all_finite() {
            return Err(Error::shape("skeleton contains non-finite coordinates"));
        }
        Ok(Self { data, layout })
    }

    pub fn persons(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn layout(&self) -> &Arc<JointLayout> {
        &self.layout
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    fn idx(&self, m: usize, c: usize, t: usize, v: usize) -> usize {
        let s = self.data.shape();
        ((m * 3 + c) * s[2] + t) * s[3] + v
    }

    pub fn point(&self, m: usize, t: usize, v: usize) -> [T; 3] {
        let d = self.data.data();
        [d[self.idx(m, 0, t, v)], d[self.idx(m, 1, t, v)], d[self.idx(m, 2, t, v)]]
    }

    pub fn set_point(&mut self, m: usize, t: usize, v: usize, p: [T; 3]) {
        for (c, &x) in p.iter().enumerate() {
            let i = self.idx(m, c, t, v);
            self.data.data_mut()[i] = x;
        }
    }

    /// Left-to-right hip distance of every frame of person `m`.
    pub fn hip_distances(&self, m: usize) -> Vec<T> {
        (0..self.frames())
            .map(|t| dist(self.point(m, t, self.layout.left_hip), self.point(m, t, self.layout.right_hip)))
            .collect()
    }

    /// Median hip distance across all persons and frames.
    pub fn median_hip_distance(&self) -> T {
        let mut all: Vec<T> = (0..self.persons()).flat_map(|m| self.hip_distances(m)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        all[all.len() / 2]
    }

    /// Same clip with every coordinate offset by `c`.
    pub fn translated(&self, c: [T; 3]) -> Self {
        self.map_points(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map_points(|p| [p[0] * s, p[1] * s, p[2] * s])
    }

    pub fn map_points(&self, f: impl Fn([T; 3]) -> [T; 3]) -> Self {
        let mut out = self.clone();
        for m in 0..self.persons() {
            for t in 0..self.frames() {
                for v in 0..self.joints() {
                    out.set_point(m, t, v, f(self.point(m, t, v)));
                }
            }
        }
        out
    }
}

fn dist<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Skeleton clip whose coordinates are pelvis-centred and hip-distance scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSkeleton<T>(SkeletonSequence<T>);

impl<T: Scalar> NormalizedSkeleton<T> {
    pub fn sequence(&self) -> &SkeletonSequence<T> {
        &self.0
    }

    pub fn into_sequence(self) -> SkeletonSequence<T> {
        self.0
    }

    /// Trusts the caller that `seq` is already normalized.
    pub fn assume_normalized(seq: SkeletonSequence<T>) -> Self {
        Self(seq)
    }
}

/// Reference frame used for the pelvis/hip normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Every frame is centred and scaled by its own hips.
    #[default]
    PerFrame,
    /// Every frame uses the pelvis and hip distance of the first frame.
    FirstFrame,
}

/// Per-frame pelvis centring and hip-distance scaling.
pub fn normalize_sequence<T: Scalar>(x: &SkeletonSequence<T>) -> Result<NormalizedSkeleton<T>> {
    normalize_with(x, AlignMode::PerFrame)
}

pub fn normalize_with<T: Scalar>(x: &SkeletonSequence<T>, mode: AlignMode) -> Result<NormalizedSkeleton<T>> {
    let (lh, rh) = (x.layout.left_hip, x.layout.right_hip);
    let half = T::of(0.5);
    let eps = T::of(HIP_EPS);
    let mut out = x.clone();
    for m in 0..x.persons() {
        let reference = |t: usize| -> Result<([T; 3], T)> {
            let (a, b) = (x.point(m, t, lh), x.point(m, t, rh));
            let s = dist(a, b);
            if !(s > eps) {
                return Err(Error::DegenerateHips { person: m, frame: t, distance: s.as_f64() });
            }
            Ok(([(a[0] + b[0]) * half, (a[1] + b[1]) * half, (a[2] + b[2]) * half], s))
        };
        let first = match mode {
            AlignMode::FirstFrame => Some(reference(0)?),
            AlignMode::PerFrame => None,
        };
        for t in 0..x.frames() {
            let (pelvis, s) = match first {
                Some(r) => r,
                None => reference(t)?,
            };
            for v in 0..x.joints() {
                let p = x.point(m, t, v);
                out.set_point(m, t, v, [(p[0] - pelvis[0]) / s, (p[1] - pelvis[1]) / s, (p[2] - pelvis[2]) / s]);
            }
        }
    }
    Ok(NormalizedSkeleton(out))
}

/// Frame index of output frame `i` when resampling `t_in` frames to `t_out`.
pub fn resample_index(i: usize, t_in: usize, t_out: usize) -> usize {
    i * t_in / t_out
}

/// Nearest-lower uniform temporal resampling to `t_out` frames.
pub fn resample_uniform<T: Scalar>(x: &SkeletonSequence<T>, t_out: usize) -> Result<SkeletonSequence<T>> {
    let (m, t_in, v) = (x.persons(), x.frames(), x.joints());
    if t_in == 0 || t_out == 0 {
        return Err(Error::EmptySequence);
    }
    let mut data = Vec::with_capacity(m * 3 * t_out * v);
    let src = x.data.data();
    for mc in 0..m * 3 {
        for i in 0..t_out {
            let t = resample_index(i, t_in, t_out);
            let off = (mc * t_in + t) * v;
            data.extend_from_slice(&src[off..off + v]);
        }
    }
    SkeletonSequence::new(Tensor::from_vec([m, 3, t_out, v], data), x.layout.clone())
}

/// Random global shift and rotation about the vertical (z) axis, shared by all frames.
pub fn augment<T: Scalar, R: Rng + ?Sized>(x: &SkeletonSequence<T>, shift_max: f64, rot_max: f64, rng: &mut R) -> SkeletonSequence<T> {
    let mut shift = [T::zero(); 3];
    for s in &mut shift {
        *s = T::of(if shift_max > 0.0 { rng.random_range(-shift_max..=shift_max) } else { 0.0 });
    }
    let angle = if rot_max > 0.0 { rng.random_range(-rot_max..=rot_max) } else { 0.0 };
    rotate_shift(x, angle, shift)
}

/// Rotates every point by `angle` radians about the z axis, then adds `shift`.
pub fn rotate_shift<T: Scalar>(x: &SkeletonSequence<T>, angle: f64, shift: [T; 3]) -> SkeletonSequence<T> {
    let (c, s) = (T::of(angle.cos()), T::of(angle.sin()));
    x.map_points(|p| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1], p[2] + shift[2]])
}

/// Restricts the clip and its layout to the `keep` joints (ascending order).
pub fn select_joints<T: Scalar>(x: &SkeletonSequence<T>, keep: &[usize]) -> Result<SkeletonSequence<T>> {
    let layout = select_layout(&x.layout, keep)?;
    let kept: Vec<usize> = keep.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let (m, t) = (x.persons(), x.frames());
    let v_in = x.joints();
    let mut data = Vec::with_capacity(m * 3 * t * kept.len());
    for row in x.data.data().chunks(v_in) {
        data.extend(kept.iter().map(|&j| row[j]));
    }
    SkeletonSequence::new(Tensor::from_vec([m, 3, t, kept.len()], data), Arc::new(layout))
}

/// Layout restricted to `keep`, with indices and edges remapped.
pub fn select_layout(layout: &JointLayout, keep: &[usize]) -> Result<JointLayout> {
    let v = layout.num_joints();
    let kept: Vec<usize> = keep.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if kept.is_empty() {
        return Err(Error::InvalidLayout("joint selection is empty".into()));
    }
    if let Some(&j) = kept.iter().find(|&&j| j >= v) {
        return Err(Error::InvalidLayout(format!("joint index {j} out of range for {v} joints")));
    }
    for r in layout.required() {
        if !kept.contains(&r) {
            return Err(Error::MissingRequiredJoint(layout.names[r].clone()));
        }
    }
    let new_index = |j: usize| kept.iter().position(|&k| k == j);
    let suffix = if kept.len() == v {
        String::new()
    } else if kept == layout.upper_body() {
        ":upper".to_string()
    } else {
        format!(":subset{}", kept.len())
    };
    let out = JointLayout {
        name: format!("{}{}", layout.name, suffix),
        names: kept.iter().map(|&j| layout.names[j].clone()).collect(),
        left_hip: new_index(layout.left_hip).unwrap(),
        right_hip: new_index(layout.right_hip).unwrap(),
        left_hand: new_index(layout.left_hand).unwrap(),
        right_hand: new_index(layout.right_hand).unwrap(),
        lower_body: layout.lower_body.iter().filter_map(|&j| new_index(j)).collect(),
        edges: layout
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((new_index(a)?, new_index(b)?)))
            .collect(),
    };
    out.validate()?;
    Ok(out)
}
