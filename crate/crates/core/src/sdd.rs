//! Spatial difference discriminator: learned hand anchors, hand-centric motion
//! descriptors and a small temporal convolution classifier.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::SddConfig;
use crate::error::{Error, Result};
use crate::flops::LayerSpec;
use crate::nn::{Conv, Linear};
use crate::scalar::Scalar;
use crate::skeleton::NormalizedSkeleton;
use crate::tensor::Tensor;

/// Channels of the per-frame hand-centric descriptor.
pub const SDD_CHANNELS: usize = 14;

/// Learned anchors for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPair<T> {
    pub left: [T; 3],
    pub right: [T; 3],
    /// Attention weights over all joints.
    pub weights_left: Vec<T>,
    pub weights_right: Vec<T>,
    /// Selected joints, largest weight first.
    pub top_left: Vec<usize>,
    pub top_right: Vec<usize>,
}

/// `(T, 14)` descriptor: `[d_L, Δd_L, r_L, d_R, Δd_R, r_R]` per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SddFeature<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> SddFeature<T> {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data.data()[t * SDD_CHANNELS..(t + 1) * SDD_CHANNELS]
    }
}

/// Indices of the `k` largest entries of `w` (ties to the lower index) and
/// their weights rescaled to sum to one.
pub fn top_k_renormalized<T: Scalar>(w: &[T], k: usize) -> (Vec<usize>, Vec<T>) {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    let total = idx.iter().fold(T::zero(), |s, &i| s + w[i]);
    let total = if total > T::zero() { total } else { T::one() };
    let ws = idx.iter().map(|&i| w[i] / total).collect();
    (idx, ws)
}

/// Time-averaged position of every joint of person 0, `V` points.
fn mean_positions<T: Scalar>(x: &NormalizedSkeleton<T>) -> Vec<[T; 3]> {
    let seq = x.sequence();
    let (t, v) = (seq.frames(), seq.joints());
    let inv = T::one() / T::of_usize(t);
    (0..v)
        .map(|j| {
            let mut acc = [T::zero(); 3];
            for ti in 0..t {
                let p = seq.point(0, ti, j);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            acc.map(|a| a * inv)
        })
        .collect()
}

/// Weighted anchor over the top-`k` joints of `w`, averaged over time.
pub fn compute_anchor<T: Scalar>(w: &[T], x: &NormalizedSkeleton<T>, k: usize) -> Result<[T; 3]> {
    let v = x.sequence().joints();
    if w.len() != v || k == 0 || k > v {
        return Err(Error::shape(format!("anchor: {} weights, {v} joints, k = {k}", w.len())));
    }
    let means = mean_positions(x);
    let (idx, ws) = top_k_renormalized(w, k);
    let mut a = [T::zero(); 3];
    for (&j, &wj) in idx.iter().zip(&ws) {
        for c in 0..3 {
            a[c] += wj * means[j][c];
        }
    }
    Ok(a)
}

/// Hand-to-anchor displacement, its temporal difference and magnitude for person 0.
pub fn hand_centric_features<T: Scalar>(x: &NormalizedSkeleton<T>, left: [T; 3], right: [T; 3]) -> SddFeature<T> {
    let seq = x.sequence();
    let layout = seq.layout();
    let frames = seq.frames();
    let mut data = Tensor::zeros([frames, SDD_CHANNELS]);
    for (h, (joint, anchor)) in [(layout.left_hand, left), (layout.right_hand, right)].into_iter().enumerate() {
        let mut prev = [T::zero(); 3];
        for t in 0..frames {
            let p = seq.point(0, t, joint);
            let d: [T; 3] = std::array::from_fn(|c| p[c] - anchor[c]);
            let row = &mut data.data_mut()[t * SDD_CHANNELS + h * 7..t * SDD_CHANNELS + h * 7 + 7];
            let mut r2 = T::zero();
            for c in 0..3 {
                row[c] = d[c];
                row[3 + c] = if t == 0 { T::zero() } else { d[c] - prev[c] };
                r2 += d[c] * d[c];
            }
            row[6] = r2.sqrt();
            prev = d;
        }
    }
    SddFeature { data }
}

/// Tape values produced by the SDD stream.
#[derive(Clone, Debug)]
pub struct SddOutput {
    /// `(N, 2, V)` softmax weights, left hand first.
    pub weights: Var,
    /// `(N, 2, 3)` anchors.
    pub anchors: Var,
    /// Selected joints, `K` per `(sample, hand)` row.
    pub top_k: Vec<usize>,
    /// `(N, 14, T, 1)` descriptor.
    pub features: Var,
    pub logits: Var,
}

/// Attention MLP, anchor construction, descriptor and temporal classifier.
#[derive(Clone, Debug)]
pub struct SddStream {
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    pub tcn1: Conv,
    pub tcn2: Conv,
    pub head: Linear,
    pub k: usize,
}

impl SddStream {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &SddConfig, c1: usize, classes: usize, rng: &mut R) -> Self {
        let mlp_hidden = Linear::new(store, "sdd.mlp.hidden", c1, cfg.mlp_hidden, crate::nn::he_std(c1), rng);
        let mlp_out = Linear::new(store, "sdd.mlp.out", cfg.mlp_hidden, 2, (1.0 / cfg.mlp_hidden as f64).sqrt(), rng);
        let tcn1 = Conv::temporal(store, "sdd.tcn1", SDD_CHANNELS, cfg.tcn_width, cfg.tcn_kernel, 1, rng);
        let tcn2 = Conv::temporal(store, "sdd.tcn2", cfg.tcn_width, cfg.tcn_width, cfg.tcn_kernel, 1, rng);
        let head = Linear::new(store, "sdd.head", cfg.tcn_width, classes, (1.0 / cfg.tcn_width as f64).sqrt(), rng);
        Self { mlp_hidden, mlp_out, tcn1, tcn2, head, k: cfg.k }
    }

    /// Per-hand joint weights from first-stage features `(N·M, C_1, T_1, V)`; returns `(N, 2, V)`.
    pub fn joint_weights<T: Scalar>(&self, tape: &mut Tape<'_, T>, first_stage: Var, n: usize) -> Result<Var> {
        let s = tape.shape(first_stage).to_vec();
        if s.len() != 4 || s[0] % n != 0 || s[1] != self.mlp_hidden.inputs {
            return Err(Error::shape(format!("sdd features {s:?} for batch {n}")));
        }
        let (m, c, t, v) = (s[0] / n, s[1], s[2], s[3]);
        let x = tape.reshape(first_stage, &[n, m, c, t, v]);
        let x = tape.mean(x, &[1, 3]);
        let x = tape.permute(x, &[0, 2, 1]);
        let h = self.mlp_hidden.forward(tape, x);
        let h = tape.relu(h);
        let scores = self.mlp_out.forward(tape, h);
        let scores = tape.permute(scores, &[0, 2, 1]);
        Ok(tape.softmax(scores))
    }

    /// `first_stage` as for [`Self::joint_weights`]; `skeleton` is the normalized
    /// `(N, M, 3, T, V)` input batch; `hands` gives the left and right hand joints.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        first_stage: Var,
        skeleton: &Tensor<T>,
        hands: [usize; 2],
    ) -> Result<SddOutput> {
        let s = skeleton.shape();
        if s.len() != 5 || s[2] != 3 {
            return Err(Error::shape(format!("skeleton batch must be (N, M, 3, T, V), got {s:?}")));
        }
        let (n, m, t, v) = (s[0], s[1], s[3], s[4]);
        let k = self.k.min(v);
        let weights = self.joint_weights(tape, first_stage, n)?;
        if tape.shape(weights)[2] != v {
            return Err(Error::shape("sdd features must keep every joint"));
        }
        let xd = skeleton.data();
        let at = |b: usize, c: usize, ti: usize, j: usize| xd[(((b * m) * 3 + c) * t + ti) * v + j];
        let inv_t = T::one() / T::of_usize(t);

        let wv = tape.value(weights).data().to_vec();
        let mut top_k = Vec::with_capacity(n * 2 * k);
        let mut table = Vec::with_capacity(n * 2 * k * 3);
        for row in 0..n * 2 {
            let (idx, _) = top_k_renormalized(&wv[row * v..(row + 1) * v], k);
            for &j in &idx {
                for c in 0..3 {
                    let sum = (0..t).fold(T::zero(), |acc, ti| acc + at(row / 2, c, ti, j));
                    table.push(sum * inv_t);
                }
            }
            top_k.extend(idx);
        }
        let flat = tape.reshape(weights, &[n * 2, v]);
        let picked = tape.gather_last(flat, &top_k);
        let picked = tape.row_normalize(picked);
        let picked = tape.reshape(picked, &[n * 2, 1, k]);
        let coords = tape.constant(Tensor::from_vec([n * 2, k, 3], table));
        let anchors = tape.bmm(picked, coords, false, false);
        let anchors = tape.reshape(anchors, &[n, 2, 3]);

        let mut hand = Vec::with_capacity(n * 2 * t * 3);
        for b in 0..n {
            for &j in &hands {
                for ti in 0..t {
                    hand.extend((0..3).map(|c| at(b, c, ti, j)));
                }
            }
        }
        let features = tape.hand_features(anchors, &Tensor::from_vec([n, 2, t, 3], hand));
        let h = self.tcn1.forward(tape, features);
        let h = tape.relu(h);
        let h = self.tcn2.forward(tape, h);
        let h = tape.relu(h);
        let pooled = tape.mean(h, &[2, 3]);
        let logits = self.head.forward(tape, pooled);
        Ok(SddOutput { weights, anchors, top_k, features, logits })
    }

    /// Reads the anchors of sample `b` out of a forward pass.
    pub fn anchor_pair<T: Scalar>(&self, tape: &Tape<'_, T>, out: &SddOutput, b: usize) -> AnchorPair<T> {
        let v = tape.shape(out.weights)[2];
        let k = out.top_k.len() / (tape.shape(out.weights)[0] * 2);
        let w = tape.value(out.weights).data();
        let a = tape.value(out.anchors).data();
        let point = |h: usize| std::array::from_fn(|c| a[(b * 2 + h) * 3 + c]);
        let row = |h: usize| w[(b * 2 + h) * v..(b * 2 + h + 1) * v].to_vec();
        let top = |h: usize| out.top_k[(b * 2 + h) * k..(b * 2 + h + 1) * k].to_vec();
        AnchorPair {
            left: point(0),
            right: point(1),
            weights_left: row(0),
            weights_right: row(1),
            top_left: top(0),
            top_right: top(1),
        }
    }

    pub fn layer_specs(&self, joints: usize, frames: usize) -> Vec<LayerSpec> {
        vec![
            self.mlp_hidden.spec(joints),
            self.mlp_out.spec(joints),
            LayerSpec::MatMul { m: 2, k: self.k.min(joints), n: 3 },
            self.tcn1.spec(frames, 1),
            self.tcn2.spec(frames, 1),
            self.head.spec(1),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{JointLayout, SkeletonSequence};
    use std::sync::Arc;

    fn static_clip(points: &[[f64; 3]], frames: usize) -> NormalizedSkeleton<f64> {
        let v = points.len();
        let mut data = Tensor::zeros([1, 3, frames, v]);
        for t in 0..frames {
            for (j, p) in points.iter().enumerate() {
                for c in 0..3 {
                    data.set(&[0, c, t, j], p[c]);
                }
            }
        }
        let layout = JointLayout {
            name: "tiny".into(),
            names: (0..v).map(|i| format!("j{i}")).collect(),
            left_hip: 0,
            right_hip: 1,
            left_hand: 0,
            right_hand: 1,
            lower_body: vec![],
            edges: (1..v).map(|j| (j - 1, j)).collect(),
        };
        NormalizedSkeleton::assume_normalized(SkeletonSequence::new(data, Arc::new(layout)).unwrap())
    }

    #[test]
    fn top_three_renormalized() {
        let (idx, w) = top_k_renormalized(&[0.5f64, 0.3, 0.2], 2);
        assert_eq!(idx, vec![0, 1]);
        assert!((w[0] - 0.625).abs() < 1e-15 && (w[1] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn anchor_examples() {
        let pts = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 4.0]];
        let x = static_clip(&pts, 3);
        let a = compute_anchor(&[0.5, 0.3, 0.2], &x, 2).unwrap();
        assert!((a[0] - 0.625).abs() < 1e-12 && (a[1] - 0.75).abs() < 1e-12 && a[2].abs() < 1e-12);
        let third = 1.0 / 3.0;
        let c = compute_anchor(&[third; 3], &x, 3).unwrap();
        assert!((c[0] - third).abs() < 1e-12 && (c[1] - 2.0 * third).abs() < 1e-12 && (c[2] - 4.0 * third).abs() < 1e-12);
        let one_hot = compute_anchor(&[0.0, 0.0, 1.0], &x, 1).unwrap();
        assert_eq!(one_hot, [0.0, 0.0, 4.0]);
        assert!(compute_anchor(&[0.5, 0.5], &x, 1).is_err());
    }
}
