//! Spatiotemporal skeleton graph, graph convolution and the skeleton expert stream.

use std::collections::VecDeque;

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::config::SkeletonConfig;
use crate::error::{Error, Result};
use crate::flops::LayerSpec;
use crate::kernels::gemm;
use crate::nn::{Conv, Linear};
use crate::scalar::Scalar;
use crate::skeleton::JointLayout;
use crate::tensor::Tensor;

/// Skeleton graph over `(frame, joint)` nodes.
///
/// Stored factored: the `V×V` spatial adjacency `D⁻¹(A + I)` is applied per
/// frame, and temporal edges (same joint, adjacent frames) are realised by
/// temporal convolution in the backbone or explicitly by [`st_graph_conv`].
#[derive(Clone, Debug)]
pub struct SpatioTemporalGraph<T> {
    joints: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor<T>,
}

pub fn build_adjacency<T: Scalar>(layout: &JointLayout) -> Result<SpatioTemporalGraph<T>> {
    let v = layout.num_joints();
    let mut nbrs = vec![Vec::new(); v];
    for &(a, b) in &layout.edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut seen = vec![false; v];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(j) = queue.pop_front() {
        for &k in &nbrs[j] {
            if !seen[k] {
                seen[k] = true;
                reached += 1;
                queue.push_back(k);
            }
        }
    }
    if reached != v {
        return Err(Error::DisconnectedGraph { reached, total: v });
    }
    let mut a = Tensor::<T>::zeros([v, v]);
    for j in 0..v {
        let inv = T::one() / T::of_usize(nbrs[j].len() + 1);
        a.set(&[j, j], inv);
        for &k in &nbrs[j] {
            a.set(&[j, k], inv);
        }
    }
    Ok(SpatioTemporalGraph { joints: v, edges: layout.edges.clone(), adjacency: a })
}

impl<T: Scalar> SpatioTemporalGraph<T> {
    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Row-normalised spatial adjacency `D⁻¹(A + I)`, `V×V`.
    pub fn spatial(&self) -> &Tensor<T> {
        &self.adjacency
    }

    fn spatial_neighbours(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.adjacency.data()[v * self.joints..(v + 1) * self.joints];
        row.iter().enumerate().filter(|(_, &w)| w > T::zero()).map(|(u, _)| u)
    }
}

fn relu_matmul<T: Scalar>(agg: &[T], n: usize, c: usize, w: &Tensor<T>) -> Tensor<T> {
    let c_out = w.shape()[1];
    let mut out = Tensor::zeros([n, c_out]);
    gemm(agg, n, c, false, w.data(), c, c_out, false, out.data_mut(), T::zero());
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// `ReLU(Â·X·W)` for node features `x: (n, C)`, `a_hat: (n, n)`, `w: (C, C')`.
pub fn graph_conv<T: Scalar>(x: &Tensor<T>, a_hat: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 2 || a_hat.ndim() != 2 || w.ndim() != 2 {
        return Err(Error::shape("graph_conv expects 2-D operands"));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if a_hat.shape() != [n, n] || w.shape()[0] != c {
        return Err(Error::shape(format!(
            "graph_conv: x {:?}, Â {:?}, W {:?}",
            x.shape(),
            a_hat.shape(),
            w.shape()
        )));
    }
    let mut agg = vec![T::zero(); n * c];
    gemm(a_hat.data(), n, n, false, x.data(), n, c, false, &mut agg, T::zero());
    Ok(relu_matmul(&agg, n, c, w))
}

/// Graph convolution over the full spatiotemporal neighbourhood.
///
/// `x` is `(frames·V, C)` with frame-major node order. Each node averages
/// itself, its spatial neighbours in the same frame and the same joint in the
/// adjacent frames (degree-normalised over the union), then `W` and ReLU apply.
pub fn st_graph_conv<T: Scalar>(x: &Tensor<T>, graph: &SpatioTemporalGraph<T>, frames: usize, w: &Tensor<T>) -> Result<Tensor<T>> {
    let v = graph.joints;
    if x.ndim() != 2 || x.shape()[0] != frames * v || w.ndim() != 2 || w.shape()[0] != x.shape()[1] {
        return Err(Error::shape(format!(
            "st_graph_conv: x {:?} for {frames} frames × {v} joints, W {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let c = x.shape()[1];
    let xd = x.data();
    let mut agg = vec![T::zero(); frames * v * c];
    for t in 0..frames {
        for j in 0..v {
            let dst = &mut agg[(t * v + j) * c..(t * v + j + 1) * c];
            let mut deg = 0usize;
            let temporal = [t.checked_sub(1), (t + 1 < frames).then_some(t + 1)];
            let sources = graph
                .spatial_neighbours(j)
                .map(|u| t * v + u)
                .chain(temporal.into_iter().flatten().map(|s| s * v + j));
            for src in sources {
                deg += 1;
                for (d, &s) in dst.iter_mut().zip(&xd[src * c..(src + 1) * c]) {
                    *d += s;
                }
            }
            let inv = T::one() / T::of_usize(deg);
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Ok(relu_matmul(&agg, frames * v, c, w))
}

/// Variables produced by a skeleton backbone for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `(N·M, C_1, T_1, V)`: the first stage, still at full joint resolution.
    pub first_stage: Var,
    /// `(N·M, C_s, T_s, V_s)`.
    pub features: Var,
}

/// Pluggable skeleton feature extractor over `(B, 3, T, V)` inputs.
pub trait SkeletonBackbone<T: Scalar>: Send + Sync {
    fn forward(&self, tape: &mut Tape<'_, T>, x: Var) -> BackboneOutput;
    fn first_stage_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// `(T_s, V_s)` for an input of `frames × joints`.
    fn out_size(&self, frames: usize, joints: usize) -> (usize, usize);
    fn layer_specs(&self, frames: usize, joints: usize) -> Vec<LayerSpec>;
}

/// Spatial graph convolution + temporal convolution with a learnable adjacency offset.
#[derive(Clone, Debug)]
struct StGcnBlock {
    adjacency_offset: ParamId,
    spatial: Conv,
    temporal: Conv,
    residual: Option<Conv>,
    c_in: usize,
}

/// Reference backbone: stacked ST-GCN blocks with adaptive adjacency.
#[derive(Clone, Debug)]
pub struct StGcnBackbone<T> {
    adjacency: Tensor<T>,
    blocks: Vec<StGcnBlock>,
}

impl<T: Scalar> StGcnBackbone<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SkeletonConfig,
        graph: &SpatioTemporalGraph<T>,
        in_channels: usize,
        rng: &mut R,
    ) -> Self {
        let v = graph.joints();
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (i, (&c_out, &stride)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            let name = format!("{prefix}.block{i}");
            let adjacency_offset = store.add(format!("{name}.adjacency_offset"), Tensor::zeros([v, v]));
            let spatial = Conv::new(store, &format!("{name}.spatial"), c_in, c_out, (1, 1), (1, 1), (0, 0), rng);
            let temporal = Conv::temporal(store, &format!("{name}.temporal"), c_out, c_out, cfg.temporal_kernel, stride, rng);
            let residual = (c_in != c_out || stride != 1)
                .then(|| Conv::new(store, &format!("{name}.residual"), c_in, c_out, (1, 1), (stride, 1), (0, 0), rng));
            blocks.push(StGcnBlock { adjacency_offset, spatial, temporal, residual, c_in });
            c_in = c_out;
        }
        Self { adjacency: graph.spatial().clone(), blocks }
    }

    fn block_forward(&self, tape: &mut Tape<'_, T>, block: &StGcnBlock, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let (b, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
        let a_hat = tape.constant(self.adjacency.clone());
        let offset = tape.param(block.adjacency_offset);
        let a = tape.add(a_hat, offset);
        let flat = tape.reshape(x, &[b * c * t, v]);
        let agg = tape.matmul(flat, a, false, true);
        let agg = tape.reshape(agg, &[b, c, t, v]);
        let h = block.spatial.forward(tape, agg);
        let h = tape.relu(h);
        let h = block.temporal.forward(tape, h);
        let res = match &block.residual {
            Some(conv) => conv.forward(tape, x),
            None => x,
        };
        let y = tape.add(h, res);
        tape.relu(y)
    }
}

impl<T: Scalar> SkeletonBackbone<T> for StGcnBackbone<T> {
    fn forward(&self, tape: &mut Tape<'_, T>, x: Var) -> BackboneOutput {
        let mut h = x;
        let mut first = None;
        for block in &self.blocks {
            h = self.block_forward(tape, block, h);
            first.get_or_insert(h);
        }
        BackboneOutput { first_stage: first.expect("at least one block"), features: h }
    }

    fn first_stage_channels(&self) -> usize {
        self.blocks[0].spatial.c_out
    }

    fn out_channels(&self) -> usize {
        self.blocks.last().unwrap().spatial.c_out
    }

    fn out_size(&self, frames: usize, joints: usize) -> (usize, usize) {
        let t = self.blocks.iter().fold(frames, |t, b| b.temporal.out_size(t, joints).0);
        (t, joints)
    }

    fn layer_specs(&self, frames: usize, joints: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut t = frames;
        for b in &self.blocks {
            specs.push(LayerSpec::Params { count: joints * joints });
            specs.push(LayerSpec::MatMul { m: b.c_in * t, k: joints, n: joints });
            specs.push(b.spatial.spec(t, joints));
            specs.push(b.temporal.spec(t, joints));
            if let Some(r) = &b.residual {
                specs.push(r.spec(t, joints));
            }
            t = b.temporal.out_size(t, joints).0;
        }
        specs
    }
}

/// Outputs of the skeleton stream for a batch of `N` clips with `M` persons.
#[derive(Clone, Copy, Debug)]
pub struct SkeletonOutput {
    pub batch: usize,
    pub persons: usize,
    pub backbone: BackboneOutput,
    /// `(N, C_classes)` pre-softmax logits, when the head is enabled.
    pub logits: Option<Var>,
}

/// Skeleton expert: backbone, global average pool over `(T_s, V_s, M)`, linear head.
pub struct SkeletonStream<T> {
    pub backbone: Box<dyn SkeletonBackbone<T>>,
    pub head: Option<Linear>,
}

impl<T: Scalar> SkeletonStream<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &SkeletonConfig,
        graph: &SpatioTemporalGraph<T>,
        num_classes: usize,
        with_head: bool,
        rng: &mut R,
    ) -> Self {
        let backbone = StGcnBackbone::new(store, "skeleton", cfg, graph, 3, rng);
        let c = backbone.out_channels();
        let head = with_head.then(|| Linear::new(store, "skeleton.head", c, num_classes, (1.0 / c as f64).sqrt(), rng));
        Self { backbone: Box::new(backbone), head }
    }

    /// `x` is a `(N, M, 3, T, V)` batch of normalized clips.
    pub fn forward(&self, tape: &mut Tape<'_, T>, x: &Tensor<T>) -> Result<SkeletonOutput> {
        let s = x.shape();
        if s.len() != 5 || s[2] != 3 {
            return Err(Error::shape(format!("skeleton batch must be (N, M, 3, T, V), got {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let input = tape.constant(x.clone().reshape([n * m, 3, s[3], s[4]]));
        let backbone = self.backbone.forward(tape, input);
        let logits = self.head.as_ref().map(|head| {
            let pooled = tape.mean(backbone.features, &[2, 3]);
            let c = tape.shape(pooled)[1];
            let pooled = tape.reshape(pooled, &[n, m, c]);
            let pooled = tape.mean(pooled, &[1]);
            head.forward(tape, pooled)
        });
        Ok(SkeletonOutput { batch: n, persons: m, backbone, logits })
    }

    pub fn layer_specs(&self, frames: usize, joints: usize) -> Vec<LayerSpec> {
        let mut specs = self.backbone.layer_specs(frames, joints);
        if let Some(h) = &self.head {
            specs.push(h.spec(1));
        }
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(v: usize, edges: Vec<(usize, usize)>) -> JointLayout {
        JointLayout {
            name: "chain".into(),
            names: (0..v).map(|i| format!("j{i}")).collect(),
            left_hip: 0,
            right_hip: 0,
            left_hand: 0,
            right_hand: 0,
            lower_body: vec![],
            edges,
        }
    }

    #[test]
    fn three_joint_chain_adjacency() {
        let g = build_adjacency::<f64>(&chain(3, vec![(0, 1), (1, 2)])).unwrap();
        let third = 1.0 / 3.0;
        let expect = [0.5, 0.5, 0.0, third, third, third, 0.0, 0.5, 0.5];
        for (a, b) in g.spatial().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_joint_and_disconnected() {
        let g = build_adjacency::<f64>(&chain(1, vec![])).unwrap();
        assert_eq!(g.spatial().data(), &[1.0]);
        assert!(matches!(
            build_adjacency::<f64>(&chain(2, vec![])),
            Err(Error::DisconnectedGraph { reached: 1, total: 2 })
        ));
    }

    #[test]
    fn test_layout_rows_sum_to_one_and_symmetric_support() {
        let g = build_adjacency::<f64>(&JointLayout::test21()).unwrap();
        let a = g.spatial();
        for i in 0..21 {
            let s: f64 = (0..21).map(|j| a.at(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a.at(&[i, i]) > 0.0);
            for j in 0..21 {
                assert_eq!(a.at(&[i, j]) > 0.0, a.at(&[j, i]) > 0.0);
            }
        }
    }

    #[test]
    fn graph_conv_examples() {
        let x = Tensor::<f64>::from_f64([2, 1], &[1.0, 3.0]);
        let a = Tensor::from_f64([2, 2], &[0.5, 0.5, 0.5, 0.5]);
        let w = Tensor::from_f64([1, 1], &[2.0]);
        assert_eq!(graph_conv(&x, &a, &w).unwrap().data(), &[4.0, 4.0]);

        let x = Tensor::<f64>::from_f64([3, 2], &[1.0, 0.0, 2.0, 5.0, 0.5, 3.0]);
        let y = graph_conv(&x, &Tensor::eye(3), &Tensor::eye(2)).unwrap();
        assert_eq!(y, x);

        assert!(matches!(graph_conv(&x, &Tensor::eye(2), &Tensor::eye(2)), Err(Error::ShapeMismatch(_))));
    }
}
