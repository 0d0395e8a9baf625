//! Bidirectional cross-attention between the skeleton and RGB streams with gated fusion.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::{AttentionMode, FusionConfig, FusionHead, SkeletonTokens};
use crate::error::{Error, Result};
use crate::flops::LayerSpec;
use crate::nn::Linear;
use crate::scalar::Scalar;

/// Projects backbone features into `d`-wide token sequences.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub skeleton: Linear,
    pub rgb: Linear,
    pub mode: SkeletonTokens,
}

impl Tokenizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        c_s: usize,
        c_r: usize,
        d: usize,
        mode: SkeletonTokens,
        rng: &mut R,
    ) -> Self {
        let skeleton = Linear::new(store, "fusion.tokens.skeleton", c_s, d, (1.0 / c_s as f64).sqrt(), rng);
        let rgb = Linear::new(store, "fusion.tokens.rgb", c_r, d, (1.0 / c_r as f64).sqrt(), rng);
        Self { skeleton, rgb, mode }
    }

    /// `f_s` is `(N·M, C_s, T_s, V_s)`; returns `(N, tokens, d)`.
    pub fn skeleton_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, f_s: Var, n: usize) -> Result<Var> {
        let s = tape.shape(f_s).to_vec();
        if s.len() != 4 || s[0] % n != 0 || s[1] != self.skeleton.inputs {
            return Err(Error::shape(format!("skeleton features {s:?} for batch {n}")));
        }
        let (m, c, t, v) = (s[0] / n, s[1], s[2], s[3]);
        let x = tape.reshape(f_s, &[n, m, c, t, v]);
        let tokens = match self.mode {
            SkeletonTokens::PooledJoints => {
                let x = tape.mean(x, &[1, 4]);
                tape.permute(x, &[0, 2, 1])
            }
            SkeletonTokens::PerJoint => {
                let x = tape.mean(x, &[1]);
                let x = tape.permute(x, &[0, 2, 3, 1]);
                tape.reshape(x, &[n, t * v, c])
            }
        };
        Ok(self.skeleton.forward(tape, tokens))
    }

    /// `f_r` is `(N, C_r, H_r, W_r)`; returns `(N, H_r·W_r, d)`.
    pub fn rgb_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, f_r: Var) -> Result<Var> {
        let s = tape.shape(f_r).to_vec();
        if s.len() != 4 || s[1] != self.rgb.inputs {
            return Err(Error::shape(format!("rgb features {s:?}")));
        }
        let x = tape.reshape(f_r, &[s[0], s[1], s[2] * s[3]]);
        let x = tape.permute(x, &[0, 2, 1]);
        Ok(self.rgb.forward(tape, x))
    }

    pub fn skeleton_token_count(&self, t_s: usize, v_s: usize) -> usize {
        match self.mode {
            SkeletonTokens::PooledJoints => t_s,
            SkeletonTokens::PerJoint => t_s * v_s,
        }
    }
}

/// Result of one cross-attention direction.
#[derive(Clone, Debug)]
pub struct Attended {
    /// Pooled attended values plus the pooled query residual, `(N, d)`.
    pub fused: Var,
    /// Pooled attended values alone, `(N, d)`.
    pub attended: Var,
    /// Attention weights per head, each `(N, n_q, n_k)`.
    pub weights: Vec<Var>,
}

/// Scaled dot-product cross-attention with query, key and value projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let std = (1.0 / d as f64).sqrt();
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, std, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, std, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, std, rng),
            heads,
        }
    }

    /// `q_tokens` is `(N, n_q, d)`, `kv_tokens` is `(N, n_k, d)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, q_tokens: Var, kv_tokens: Var) -> Result<Attended> {
        let (qs, ks) = (tape.shape(q_tokens).to_vec(), tape.shape(kv_tokens).to_vec());
        let d = self.query.inputs;
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != d || ks[2] != d {
            return Err(Error::shape(format!("cross attention: queries {qs:?}, keys {ks:?}, width {d}")));
        }
        let q = self.query.forward(tape, q_tokens);
        let k = self.key.forward(tape, kv_tokens);
        let v = self.value.forward(tape, kv_tokens);
        let dh = d / self.heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice(q, 2, h * dh, dh), tape.slice(k, 2, h * dh, dh), tape.slice(v, 2, h * dh, dh))
            };
            let scores = tape.bmm(qh, kh, false, true);
            let scores = tape.scale(scores, scale);
            let w = tape.softmax(scores);
            outs.push(tape.bmm(w, vh, false, false));
            weights.push(w);
        }
        let out = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2) };
        let attended = tape.mean(out, &[1]);
        let residual = tape.mean(q_tokens, &[1]);
        let fused = tape.add(attended, residual);
        Ok(Attended { fused, attended, weights })
    }

    pub fn layer_specs(&self, n_q: usize, n_k: usize) -> Vec<LayerSpec> {
        vec![
            self.query.spec(n_q),
            self.key.spec(n_k),
            self.value.spec(n_k),
            LayerSpec::Attention { n_q, n_k, d: self.query.inputs },
        ]
    }
}

/// Outputs of the fusion stream.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub logits: Var,
    /// `(N, 2)` gate weights `[G_S, G_R]` when both directions are active.
    pub gates: Option<Var>,
    pub skeleton_query: Option<Attended>,
    pub rgb_query: Option<Attended>,
}

/// Gate over the two fused embeddings followed by the classifier head.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub gate: Linear,
    pub head: Option<Linear>,
}

impl GatedFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, d: usize, classes: usize, head: FusionHead, rng: &mut R) -> Self {
        let gate = Linear::new(store, "fusion.gate", 2 * d, 2, (1.0 / (2 * d) as f64).sqrt(), rng);
        let head = (head == FusionHead::LinearAfterGate)
            .then(|| Linear::new(store, "fusion.head", d, classes, (1.0 / d as f64).sqrt(), rng));
        Self { gate, head }
    }

    /// Returns `(logits, gates)` for fused embeddings of shape `(N, d)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, f_s: Var, f_r: Var) -> Result<(Var, Var)> {
        let d = self.gate.inputs / 2;
        if tape.shape(f_s) != tape.shape(f_r) || tape.shape(f_s).len() != 2 || tape.shape(f_s)[1] != d {
            return Err(Error::shape(format!("gated fusion: {:?} vs {:?}", tape.shape(f_s), tape.shape(f_r))));
        }
        let both = tape.concat(&[f_s, f_r], 1);
        let scores = self.gate.forward(tape, both);
        let gates = tape.softmax(scores);
        let a = tape.mul_col(f_s, gates, 0);
        let b = tape.mul_col(f_r, gates, 1);
        let mixed = tape.add(a, b);
        let logits = match &self.head {
            Some(h) => h.forward(tape, mixed),
            None => mixed,
        };
        Ok((logits, gates))
    }
}

/// Dual-attention fusion expert.
#[derive(Clone, Debug)]
pub struct FusionStream {
    pub tokenizer: Tokenizer,
    /// Skeleton tokens query RGB tokens.
    pub ske_query: Option<CrossAttention>,
    /// RGB tokens query skeleton tokens.
    pub rgb_query: Option<CrossAttention>,
    pub gated: Option<GatedFusion>,
    /// Classifier for single-direction modes.
    pub single_head: Option<Linear>,
}

impl FusionStream {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &FusionConfig,
        c_s: usize,
        c_r: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let tokenizer = Tokenizer::new(store, c_s, c_r, d, cfg.skeleton_tokens, rng);
        let dual = cfg.attention == AttentionMode::Dual;
        let ske_query = (cfg.attention != AttentionMode::SingleRgbQuery)
            .then(|| CrossAttention::new(store, "fusion.ske_query", d, cfg.heads, rng));
        let rgb_query = (cfg.attention != AttentionMode::SingleSkeQuery)
            .then(|| CrossAttention::new(store, "fusion.rgb_query", d, cfg.heads, rng));
        let gated = dual.then(|| GatedFusion::new(store, d, classes, cfg.head, rng));
        let single_head = (!dual && cfg.head == FusionHead::LinearAfterGate)
            .then(|| Linear::new(store, "fusion.head", d, classes, (1.0 / d as f64).sqrt(), rng));
        Self { tokenizer, ske_query, rgb_query, gated, single_head }
    }

    /// `f_s` is `(N·M, C_s, T_s, V_s)` and `f_r` is `(N, C_r, H_r, W_r)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, f_s: Var, f_r: Var, n: usize) -> Result<FusionOutput> {
        let s_tok = self.tokenizer.skeleton_tokens(tape, f_s, n)?;
        let r_tok = self.tokenizer.rgb_tokens(tape, f_r)?;
        let skeleton_query = self.ske_query.as_ref().map(|a| a.forward(tape, s_tok, r_tok)).transpose()?;
        let rgb_query = self.rgb_query.as_ref().map(|a| a.forward(tape, r_tok, s_tok)).transpose()?;
        let (logits, gates) = match (&self.gated, &skeleton_query, &rgb_query) {
            (Some(g), Some(s), Some(r)) => {
                let (l, g) = g.forward(tape, s.fused, r.fused)?;
                (l, Some(g))
            }
            (_, s, r) => {
                let single = s.as_ref().or(r.as_ref()).expect("one attention direction").fused;
                let logits = match &self.single_head {
                    Some(h) => h.forward(tape, single),
                    None => single,
                };
                (logits, None)
            }
        };
        Ok(FusionOutput { logits, gates, skeleton_query, rgb_query })
    }

    /// Fixed gate pair reported for single-direction modes.
    pub fn fixed_gates(&self) -> Option<[f64; 2]> {
        match (&self.ske_query, &self.rgb_query) {
            (Some(_), None) => Some([1.0, 0.0]),
            (None, Some(_)) => Some([0.0, 1.0]),
            _ => None,
        }
    }

    pub fn layer_specs(&self, t_s: usize, v_s: usize, rgb_tokens: usize) -> Vec<LayerSpec> {
        let s_tokens = self.tokenizer.skeleton_token_count(t_s, v_s);
        let mut specs = vec![self.tokenizer.skeleton.spec(s_tokens), self.tokenizer.rgb.spec(rgb_tokens)];
        if let Some(a) = &self.ske_query {
            specs.extend(a.layer_specs(s_tokens, rgb_tokens));
        }
        if let Some(a) = &self.rgb_query {
            specs.extend(a.layer_specs(rgb_tokens, s_tokens));
        }
        if let Some(g) = &self.gated {
            specs.push(g.gate.spec(1));
            if let Some(h) = &g.head {
                specs.push(h.spec(1));
            }
        }
        if let Some(h) = &self.single_head {
            specs.push(h.spec(1));
        }
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gate_gives_even_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let g = GatedFusion::new(&mut store, 4, 5, FusionHead::LinearAfterGate, &mut rng);
        *store.get_mut(g.gate.weight) = Tensor::zeros([8, 2]);
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::randn([3, 4], 1.0, &mut rng));
        let b = tape.input(Tensor::randn([3, 4], 1.0, &mut rng));
        let (logits, gates) = g.forward(&mut tape, a, b).unwrap();
        assert_eq!(tape.shape(logits), &[3, 5]);
        assert!(tape.value(gates).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_key_attends_to_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let att = CrossAttention::new(&mut store, "a", 4, 1, &mut rng);
        let mut tape = Tape::new(&store);
        let q1 = tape.input(Tensor::randn([2, 3, 4], 1.0, &mut rng));
        let q2 = tape.input(Tensor::randn([2, 5, 4], 1.0, &mut rng));
        let kv = tape.input(Tensor::randn([2, 1, 4], 1.0, &mut rng));
        let a1 = att.forward(&mut tape, q1, kv).unwrap();
        let a2 = att.forward(&mut tape, q2, kv).unwrap();
        assert!(tape.value(a1.attended).max_abs_diff(tape.value(a2.attended)) < 1e-12);
        assert!(tape.value(a1.weights[0]).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let att = CrossAttention::new(&mut store, "a", 4, 1, &mut rng);
        let mut tape = Tape::new(&store);
        let q = tape.input(Tensor::zeros([1, 2, 4]));
        let kv = tape.input(Tensor::zeros([1, 2, 3]));
        assert!(matches!(att.forward(&mut tape, q, kv), Err(Error::ShapeMismatch(_))));
    }
}
