//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradients of a scalar output with
//! respect to every recorded value. Parameters live in a [`ParamStore`] and
//! enter the tape as leaves through [`Tape::param`].

use crate::kernels::{col2im, gemm, im2col, permute_map, reduce_map, split_axis, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Relu(Var),
    AddBias { x: Var, b: Var, axis: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Mean { x: Var, axes: Vec<usize> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    RowNormalize(Var),
    MulCol { x: Var, g: Var, col: usize },
    HandFeatures { anchor: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every tape value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars[id.0].and_then(|v| self.wrt(v))
    }

    /// Gradients indexed by [`ParamId`]; `None` for parameters the output does not touch.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        let vars = std::mem::take(&mut self.param_vars);
        vars.into_iter().map(|v| v.and_then(|v| self.grads[v.0].take())).collect()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameter leaf; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Leaf that gradients are tracked for (not a parameter).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Adds a vector `b` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let (_, len, inner) = split_axis(vx.shape(), axis);
        let vb = self.value(b);
        assert_eq!(vb.numel(), len, "bias length does not match axis {axis}");
        let mut out = vx.clone();
        let bd = vb.data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bd[(i / inner) % len];
        }
        self.push(out, Op::AddBias { x, b, axis }, &[x, b])
    }

    /// 2-D matrix product `op(a)·op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.ndim() == 2 && vb.ndim() == 2, "matmul expects 2-D operands");
        let (ar, ac) = (va.shape()[0], va.shape()[1]);
        let (br, bc) = (vb.shape()[0], vb.shape()[1]);
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = Tensor::zeros([m, n]);
        gemm(va.data(), ar, ac, ta, vb.data(), br, bc, tb, out.data_mut(), T::zero());
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Batched matrix product over the leading axis of two 3-D operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.ndim() == 3 && vb.ndim() == 3, "bmm expects 3-D operands");
        let batch = va.shape()[0];
        assert_eq!(batch, vb.shape()[0], "bmm batch mismatch");
        let (ar, ac) = (va.shape()[1], va.shape()[2]);
        let (br, bc) = (vb.shape()[1], vb.shape()[2]);
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = Tensor::zeros([batch, m, n]);
        for i in 0..batch {
            gemm(
                &va.data()[i * ar * ac..(i + 1) * ar * ac],
                ar,
                ac,
                ta,
                &vb.data()[i * br * bc..(i + 1) * br * bc],
                br,
                bc,
                tb,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// 2-D convolution (cross-correlation) of `x: (N, C, H, W)` with `w: (O, C, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects 4-D input and weight");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let g = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], (ws[2], ws[3]), stride, pad);
        let n = xs[0];
        let in_sz = g.c * g.h * g.w;
        let out_sz = g.o * g.ho * g.wo;
        let mut out = Tensor::zeros([n, g.o, g.ho, g.wo]);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
        for i in 0..n {
            let xi = &vx.data()[i * in_sz..(i + 1) * in_sz];
            let col: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            gemm(
                vw.data(),
                g.o,
                g.col_rows(),
                false,
                col,
                g.col_rows(),
                g.col_cols(),
                false,
                &mut out.data_mut()[i * out_sz..(i + 1) * out_sz],
                T::zero(),
            );
        }
        self.push(out, Op::Conv2d { x, w, geom: g }, &[x, w])
    }

    /// Max pooling over `(H, W)` of `(N, C, H, W)`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = vx.data();
        let mut k = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for i in 0..kernel {
                        let ih = (oh * stride + i) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..kernel {
                            let iw = (ow * stride + j) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if d[idx] > best {
                                best = d[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.data_mut()[k] = best;
                    argmax.push(best_i);
                    k += 1;
                }
            }
        }
        self.push(out, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Mean over `axes`; the reduced axes are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Var {
        let vx = self.value(x);
        let (mut out_shape, map) = reduce_map(vx.shape(), axes);
        let count = axes.iter().map(|&a| vx.shape()[a]).product::<usize>();
        let mut data = vec![T::zero(); numel(&out_shape)];
        for (&v, &o) in vx.data().iter().zip(&map) {
            data[o] += v;
        }
        let inv = T::one() / T::of_usize(count);
        data.iter_mut().for_each(|v| *v *= inv);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_vec(out_shape, data);
        self.push(out, Op::Mean { x, axes: axes.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        let (shape, map) = permute_map(vx.shape(), perm);
        let data = map.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::from_vec(shape, data);
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape.to_vec());
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let len = *vx.shape().last().expect("softmax of 0-d tensor");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(len) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Mean cross-entropy of `(N, C)` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        let (n, c) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(n, labels.len(), "one label per row");
        let mut total = T::zero();
        for (row, &y) in vl.data().chunks(c).zip(labels) {
            assert!(y < c, "label {y} out of range");
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / T::of_usize(n));
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec() }, &[logits])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]).shape().to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in xs {
            let s = self.value(v).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch on axis {i}");
            }
            shape[axis] += s[axis];
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut data = vec![T::zero(); numel(&shape)];
        let mut off = 0;
        for &v in xs {
            let vv = self.value(v);
            let len = vv.shape()[axis];
            for o in 0..outer {
                let src = &vv.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * total + off) * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
            }
            off += len;
        }
        let out = Tensor::from_vec(shape, data);
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (outer, total, inner) = split_axis(vx.shape(), axis);
        assert!(start + len <= total, "slice out of range");
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&vx.data()[s..s + len * inner]);
        }
        let out = Tensor::from_vec(shape, data);
        self.push(out, Op::Slice { x, axis, start }, &[x])
    }

    /// Picks `idx.len() / R` entries from every row of the last axis.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let len = *vx.shape().last().unwrap();
        let rows = vx.numel() / len;
        assert_eq!(idx.len() % rows, 0, "gather index count must be a multiple of the row count");
        let k = idx.len() / rows;
        let mut data = Vec::with_capacity(idx.len());
        for r in 0..rows {
            for &j in &idx[r * k..(r + 1) * k] {
                assert!(j < len, "gather index out of range");
                data.push(vx.data()[r * len + j]);
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let out = Tensor::from_vec(shape, data);
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Divides every row of the last axis by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let len = *vx.shape().last().unwrap();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(len) {
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::RowNormalize(x), &[x])
    }

    /// Scales each row of `x: (N, D)` by column `col` of `g: (N, G)`.
    pub fn mul_col(&mut self, x: Var, g: Var, col: usize) -> Var {
        let (vx, vg) = (self.value(x), self.value(g));
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let gc = vg.shape()[1];
        assert_eq!(vg.shape()[0], n, "mul_col row mismatch");
        assert!(col < gc);
        let mut out = vx.clone();
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let s = vg.data()[i * gc + col];
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol { x, g, col }, &[x, g])
    }

    /// Hand-centric motion descriptor as a `(N, 14, T, 1)` channel-first sequence.
    ///
    /// `anchor` is `(N, 2, 3)` (left, right); `hands` holds the matching hand
    /// trajectories as `(N, 2, T, 3)`. Channels per hand are
    /// `[d (3), Δd (3), r (1)]`, left hand first.
    pub fn hand_features(&mut self, anchor: Var, hands: &Tensor<T>) -> Var {
        let va = self.value(anchor);
        let hs = hands.shape().to_vec();
        assert_eq!(hs.len(), 4);
        let (n, t) = (hs[0], hs[2]);
        assert!(hs[1] == 2 && hs[3] == 3, "hands must be (N, 2, T, 3)");
        assert_eq!(va.shape(), &[n, 2, 3], "anchor must be (N, 2, 3)");
        let mut out = Tensor::zeros([n, 14, t, 1]);
        let od = out.data_mut();
        for b in 0..n {
            for h in 0..2 {
                let a = &va.data()[(b * 2 + h) * 3..(b * 2 + h) * 3 + 3];
                let base = (b * 14 + h * 7) * t;
                let mut prev = [T::zero(); 3];
                for ti in 0..t {
                    let x = &hands.data()[((b * 2 + h) * t + ti) * 3..((b * 2 + h) * t + ti) * 3 + 3];
                    let mut r2 = T::zero();
                    for c in 0..3 {
                        let d = x[c] - a[c];
                        od[base + c * t + ti] = d;
                        od[base + (3 + c) * t + ti] = if ti == 0 { T::zero() } else { d - prev[c] };
                        prev[c] = d;
                        r2 += d * d;
                    }
                    od[base + 6 * t + ti] = r2.sqrt();
                }
            }
        }
        self.push(out, Op::HandFeatures { anchor }, &[anchor])
    }

    /// Gradients of the scalar `output` with respect to all tape values.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.shape(), data));
            }
            Op::AddBias { x, b, axis } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (_, len, inner) = split_axis(g.shape(), *axis);
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    let d = gb.data_mut();
                    for (k, &gi) in g.data().iter().enumerate() {
                        d[(k / inner) % len] += gi;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ar, ac) = (va.shape()[0], va.shape()[1]);
                let (br, bc) = (vb.shape()[0], vb.shape()[1]);
                let (m, n) = (g.shape()[0], g.shape()[1]);
                if self.wants(*a) {
                    let mut ga = Tensor::zeros([ar, ac]);
                    matmul_grad_a(g.data(), m, n, vb.data(), br, bc, *ta, *tb, ga.data_mut());
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros([br, bc]);
                    matmul_grad_b(g.data(), m, n, va.data(), ar, ac, *ta, *tb, gb.data_mut());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let batch = va.shape()[0];
                let (ar, ac) = (va.shape()[1], va.shape()[2]);
                let (br, bc) = (vb.shape()[1], vb.shape()[2]);
                let (m, n) = (g.shape()[1], g.shape()[2]);
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    for k in 0..batch {
                        matmul_grad_a(
                            &g.data()[k * m * n..(k + 1) * m * n],
                            m,
                            n,
                            &vb.data()[k * br * bc..(k + 1) * br * bc],
                            br,
                            bc,
                            *ta,
                            *tb,
                            &mut ga.data_mut()[k * ar * ac..(k + 1) * ar * ac],
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    for k in 0..batch {
                        matmul_grad_b(
                            &g.data()[k * m * n..(k + 1) * m * n],
                            m,
                            n,
                            &va.data()[k * ar * ac..(k + 1) * ar * ac],
                            ar,
                            ac,
                            *ta,
                            *tb,
                            &mut gb.data_mut()[k * br * bc..(k + 1) * br * bc],
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let gm = *geom;
                let (vx, vw) = (self.value(*x), self.value(*w));
                let n = vx.shape()[0];
                let in_sz = gm.c * gm.h * gm.w;
                let out_sz = gm.o * gm.ho * gm.wo;
                let (rows, ncols) = (gm.col_rows(), gm.col_cols());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { Some(Tensor::zeros(vx.shape())) } else { None };
                let mut gw = if want_w { Some(Tensor::zeros(vw.shape())) } else { None };
                let mut cols = vec![T::zero(); if gm.is_pointwise() { 0 } else { rows * ncols }];
                let mut dcols = vec![T::zero(); if gm.is_pointwise() || !want_x { 0 } else { rows * ncols }];
                for k in 0..n {
                    let gk = &g.data()[k * out_sz..(k + 1) * out_sz];
                    let xk = &vx.data()[k * in_sz..(k + 1) * in_sz];
                    if let Some(gw) = gw.as_mut() {
                        let col: &[T] = if gm.is_pointwise() {
                            xk
                        } else {
                            im2col(xk, &gm, &mut cols);
                            &cols
                        };
                        gemm(gk, gm.o, ncols, false, col, rows, ncols, true, gw.data_mut(), T::one());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx.data_mut()[k * in_sz..(k + 1) * in_sz];
                        if gm.is_pointwise() {
                            gemm(vw.data(), gm.o, rows, true, gk, gm.o, ncols, false, dst, T::one());
                        } else {
                            gemm(vw.data(), gm.o, rows, true, gk, gm.o, ncols, false, &mut dcols, T::zero());
                            col2im(&dcols, &gm, dst);
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let d = gx.data_mut();
                for (&src, &gi) in argmax.iter().zip(g.data()) {
                    d[src] += gi;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean { x, axes } => {
                let vx = self.value(*x);
                let (_, map) = reduce_map(vx.shape(), axes);
                let count = axes.iter().map(|&a| vx.shape()[a]).product::<usize>();
                let inv = T::one() / T::of_usize(count);
                let data = map.iter().map(|&o| g.data()[o] * inv).collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), data));
            }
            Op::Permute { x, perm } => {
                let vx = self.value(*x);
                let (_, map) = permute_map(vx.shape(), perm);
                let mut gx = Tensor::zeros(vx.shape());
                let d = gx.data_mut();
                for (&src, &gi) in map.iter().zip(g.data()) {
                    d[src] += gi;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let len = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(len).zip(y.data().chunks(len)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gi, &yi) in gr.iter_mut().zip(yr) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let vl = self.value(*logits);
                let (n, c) = (vl.shape()[0], vl.shape()[1]);
                let scale = g.data()[0] / T::of_usize(n);
                let mut gl = vl.clone();
                for (row, &y) in gl.data_mut().chunks_mut(c).zip(labels) {
                    softmax_in_place(row);
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut off = 0;
                for &v in xs {
                    let vs = self.value(v).shape().to_vec();
                    let len = vs[*axis];
                    if self.wants(v) {
                        let mut data = Vec::with_capacity(numel(&vs));
                        for o in 0..outer {
                            let s = (o * total + off) * inner;
                            data.extend_from_slice(&g.data()[s..s + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(vs, data));
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let vs = self.value(*x).shape().to_vec();
                let (outer, total, inner) = split_axis(&vs, *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(vs);
                for o in 0..outer {
                    let s = (o * total + start) * inner;
                    gx.data_mut()[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let vx = self.value(*x);
                let len = *vx.shape().last().unwrap();
                let rows = vx.numel() / len;
                let k = idx.len() / rows;
                let mut gx = Tensor::zeros(vx.shape());
                let d = gx.data_mut();
                for (p, (&j, &gi)) in idx.iter().zip(g.data()).enumerate() {
                    d[(p / k) * len + j] += gi;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowNormalize(x) => {
                let vx = self.value(*x);
                let y = &node.value;
                let len = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for ((gr, yr), xr) in gx.data_mut().chunks_mut(len).zip(y.data().chunks(len)).zip(vx.data().chunks(len)) {
                    let s: T = xr.iter().copied().sum();
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gr.iter_mut().for_each(|gi| *gi = (*gi - dot) / s);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MulCol { x, g: gv, col } => {
                let (vx, vg) = (self.value(*x), self.value(*gv));
                let d = vx.shape()[1];
                let gc = vg.shape()[1];
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (r, row) in gx.data_mut().chunks_mut(d).enumerate() {
                        let s = vg.data()[r * gc + col];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*gv) {
                    let mut gg = Tensor::zeros(vg.shape());
                    for (r, (gr, xr)) in g.data().chunks(d).zip(vx.data().chunks(d)).enumerate() {
                        gg.data_mut()[r * gc + col] = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    }
                    self.accumulate(grads, *gv, gg);
                }
            }
            Op::HandFeatures { anchor, .. } => {
                // Δd does not depend on the anchor; d contributes -I and r contributes -d/r.
                let y = &node.value;
                let (n, t) = (y.shape()[0], y.shape()[2]);
                let mut ga = Tensor::zeros([n, 2, 3]);
                for b in 0..n {
                    for h in 0..2 {
                        let base = (b * 14 + h * 7) * t;
                        for c in 0..3 {
                            let mut acc = T::zero();
                            for ti in 0..t {
                                let r = y.data()[base + 6 * t + ti];
                                let d = y.data()[base + c * t + ti];
                                acc -= g.data()[base + c * t + ti];
                                if r > T::zero() {
                                    acc -= g.data()[base + 6 * t + ti] * d / r;
                                }
                            }
                            ga.data_mut()[(b * 2 + h) * 3 + c] = acc;
                        }
                    }
                }
                self.accumulate(grads, *anchor, ga);
            }
        }
    }
}

/// Gradient of `C = op(A)·op(B)` with respect to the stored `A`.
#[allow(clippy::too_many_arguments)]
fn matmul_grad_a<T: Scalar>(g: &[T], m: usize, n: usize, b: &[T], br: usize, bc: usize, ta: bool, tb: bool, out: &mut [T]) {
    // op(B)^T as stored: if tb, op(B) = B^T so op(B)^T = B (no transpose).
    if !ta {
        // dA (m, k) = G · op(B)^T
        gemm(g, m, n, false, b, br, bc, !tb, out, T::zero());
    } else {
        // dA (k, m) = op(B) · G^T
        gemm(b, br, bc, tb, g, m, n, true, out, T::zero());
    }
}

/// Gradient of `C = op(A)·op(B)` with respect to the stored `B`.
#[allow(clippy::too_many_arguments)]
fn matmul_grad_b<T: Scalar>(g: &[T], m: usize, n: usize, a: &[T], ar: usize, ac: usize, ta: bool, tb: bool, out: &mut [T]) {
    if !tb {
        // dB (k, n) = op(A)^T · G
        gemm(a, ar, ac, !ta, g, m, n, false, out, T::zero());
    } else {
        // dB (n, k) = G^T · op(A)
        gemm(g, m, n, true, a, ar, ac, ta, out, T::zero());
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
