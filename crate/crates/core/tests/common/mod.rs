#![allow(dead_code)]

use std::sync::Arc;

use ipay::config::{Config, RgbConfig, SddConfig, SkeletonConfig, Streams};
use ipay::skeleton::{JointLayout, NormalizedSkeleton, SkeletonSequence};
use ipay::Tensor;
use rand::Rng;

/// Five-joint chain: hips 0/1, hands 3/4.
pub fn five_joint_layout() -> JointLayout {
    JointLayout {
        name: "five".into(),
        names: ["left_hip", "right_hip", "spine", "left_hand", "right_hand"].map(String::from).to_vec(),
        left_hip: 0,
        right_hip: 1,
        left_hand: 3,
        right_hand: 4,
        lower_body: vec![],
        edges: vec![(0, 2), (1, 2), (2, 3), (2, 4)],
    }
}

/// Random clip with hips at least 0.2 apart in every frame.
pub fn random_clip<R: Rng>(rng: &mut R, layout: &JointLayout, m: usize, t: usize) -> SkeletonSequence<f64> {
    let v = layout.num_joints();
    let mut data = vec![0.0; m * 3 * t * v];
    for p in 0..m {
        for ti in 0..t {
            for j in 0..v {
                for c in 0..3 {
                    data[((p * 3 + c) * t + ti) * v + j] = rng.random_range(-2.0..2.0);
                }
            }
            let (lh, rh) = (layout.left_hip, layout.right_hip);
            let idx = |c: usize, j: usize| ((p * 3 + c) * t + ti) * v + j;
            data[idx(0, rh)] = data[idx(0, lh)] + rng.random_range(0.2..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    SkeletonSequence::new(Tensor::from_vec([m, 3, t, v], data), Arc::new(layout.clone())).unwrap()
}

/// Micro configuration on the five-joint layout used for hand-counted FLOPs.
pub fn micro(streams: Streams) -> Config {
    let mut c = Config::default();
    c.model.streams = streams;
    c.model.skeleton = SkeletonConfig { widths: vec![2], strides: vec![1], temporal_kernel: 3 };
    c.model.rgb = RgbConfig { stem_width: 2, widths: vec![3], ..RgbConfig::default() };
    c.model.fusion.dim = 4;
    c.model.sdd = SddConfig { k: 2, mlp_hidden: 3, tcn_width: 4, tcn_kernel: 3 };
    c.data.frames = 4;
    c.data.roi.frames = 2;
    c.data.roi.box_out = 4;
    c.data.roi.informative_joints = vec!["left_hand".into(), "right_hand".into()];
    c
}

pub fn streams(skeleton: bool, rgb: bool, fusion: bool, sdd: bool) -> Streams {
    Streams { skeleton, rgb, fusion, sdd }
}

/// Very small full model for gradient and accounting checks.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.model.skeleton = SkeletonConfig { widths: vec![3, 4], strides: vec![1, 2], temporal_kernel: 3 };
    c.model.rgb = RgbConfig { stem_width: 3, widths: vec![4, 4], ..RgbConfig::default() };
    c.model.fusion.dim = 4;
    c.model.sdd = SddConfig { k: 3, mlp_hidden: 4, tcn_width: 4, tcn_kernel: 3 };
    c.data.frames = 8;
    c.data.roi.frames = 2;
    c.data.roi.box_size = 8;
    c.data.roi.box_out = 8;
    c.train.batch_size = 4;
    c
}

/// Tiny f64 model on the 21-joint layout with a random batch of `n` clips.
pub fn tiny_model_and_batch(cfg: &Config, n: usize, seed: u64) -> (ipay::model::IPayModel<f64>, ipay::model::Batch<f64>) {
    use rand::SeedableRng;
    let model = ipay::model::IPayModel::<f64>::new(cfg, &JointLayout::test21()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (t, v) = (cfg.data.frames, model.layout.num_joints());
    let skeleton = Tensor::randn([n, 1, 3, t, v], 0.5, &mut rng);
    let roi = &cfg.data.roi;
    let rgb = model.needs_rgb().then(|| Tensor::randn([n, 3, roi.height(), roi.width()], 1.0, &mut rng));
    let labels = (0..n).map(|i| i % cfg.model.num_classes).collect();
    (model, ipay::model::Batch { skeleton, rgb, labels })
}

/// Dense `(T·V)²` neighbourhood matrix built straight from the edge list.
pub fn dense_st_adjacency(layout: &JointLayout, frames: usize) -> Vec<Vec<f64>> {
    let v = layout.num_joints();
    let n = frames * v;
    let mut a = vec![vec![0.0; n]; n];
    for t in 0..frames {
        for j in 0..v {
            let i = t * v + j;
            a[i][i] = 1.0;
            for &(p, q) in &layout.edges {
                if p == j {
                    a[i][t * v + q] = 1.0;
                }
                if q == j {
                    a[i][t * v + p] = 1.0;
                }
            }
            if t > 0 {
                a[i][i - v] = 1.0;
            }
            if t + 1 < frames {
                a[i][i + v] = 1.0;
            }
        }
    }
    for row in &mut a {
        let deg: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= deg);
    }
    a
}

pub fn dense_reference(a: &[Vec<f64>], x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (n, c, c_out) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; n * c_out];
    for i in 0..n {
        for o in 0..c_out {
            let mut s = 0.0;
            for k in 0..n {
                for ci in 0..c {
                    s += a[i][k] * x.at(&[k, ci]) * w.at(&[ci, o]);
                }
            }
            out[i * c_out + o] = s.max(0.0);
        }
    }
    out
}

/// Anchor by brute force: sort joints by weight, keep `k`, renormalise, average positions over frames.
pub fn oracle_anchor(w: &[f64], x: &NormalizedSkeleton<f64>, k: usize) -> [f64; 3] {
    let seq = x.sequence();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let kept = &order[..k];
    let z: f64 = kept.iter().map(|&j| w[j]).sum();
    let mut a = [0.0; 3];
    for &j in kept {
        for t in 0..seq.frames() {
            let p = seq.point(0, t, j);
            for c in 0..3 {
                a[c] += w[j] / z * p[c] / seq.frames() as f64;
            }
        }
    }
    a
}

/// Hand rows `[d, d(t) - d(t-1), |d|]` for the left then right hand, by direct loops.
pub fn oracle_features(x: &NormalizedSkeleton<f64>, left: [f64; 3], right: [f64; 3]) -> Vec<[f64; 14]> {
    let seq = x.sequence();
    let l = seq.layout();
    (0..seq.frames())
        .map(|t| {
            let mut row = [0.0; 14];
            for (h, (j, a)) in [(l.left_hand, left), (l.right_hand, right)].into_iter().enumerate() {
                let p = seq.point(0, t, j);
                for c in 0..3 {
                    let d = p[c] - a[c];
                    row[h * 7 + c] = d;
                    row[h * 7 + 3 + c] = if t == 0 { 0.0 } else { d - (seq.point(0, t - 1, j)[c] - a[c]) };
                    row[h * 7 + 6] += d * d;
                }
                row[h * 7 + 6] = row[h * 7 + 6].sqrt();
            }
            row
        })
        .collect()
}
