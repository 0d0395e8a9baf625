//! Parameterised layers recorded onto a [`Tape`].

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::flops::LayerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He-normal standard deviation for `fan_in` inputs.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Affine map over the last axis; weights stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn([inputs, outputs], std, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([outputs])));
        Self { weight, bias, inputs, outputs }
    }

    /// `x` may have any leading shape; the last axis must equal `inputs`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.inputs, "linear input width");
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, self.inputs]) };
        let w = tape.param(self.weight);
        let mut y = tape.matmul(flat, w, false, false);
        if let Some(b) = self.bias {
            let b = tape.param(b);
            y = tape.add_bias(y, b, 1);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.outputs;
            tape.reshape(y, &out)
        }
    }

    pub fn spec(&self, rows: usize) -> LayerSpec {
        LayerSpec::Linear { inputs: self.inputs, outputs: self.outputs, rows, bias: self.bias.is_some() }
    }
}

/// 2-D convolution with bias over `(N, C, H, W)`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let std = he_std(c_in * kernel.0 * kernel.1);
        let weight = store.add(format!("{name}.weight"), Tensor::randn([c_out, c_in, kernel.0, kernel.1], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        Self { weight, bias, c_in, c_out, kernel, stride, pad }
    }

    /// Same-padded convolution along the first spatial axis only.
    pub fn temporal<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, c_in, c_out, (kernel, 1), (stride, 1), ((kernel - 1) / 2, 0), rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        let b = tape.param(self.bias);
        tape.add_bias(y, b, 1)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    pub fn spec(&self, h: usize, w: usize) -> LayerSpec {
        let (ho, wo) = self.out_size(h, w);
        LayerSpec::Conv {
            kernel: self.kernel.0 * self.kernel.1,
            c_in: self.c_in,
            c_out: self.c_out,
            spatial_out: ho * wo,
            bias: true,
        }
    }
}
