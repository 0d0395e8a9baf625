//! Analytic per-sample FLOPs and exact parameter counts.
//!
//! Conventions: a multiply-add is two FLOPs; convolutions cost
//! `2·k·C_in·C_out·spatial_out`, linear maps `2·in·out` per row, and
//! attention `2·n_q·n_k·d` for each of its two products. Biases, activations,
//! pooling and normalisation are not counted.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize, rows: usize, bias: bool },
    Conv { kernel: usize, c_in: usize, c_out: usize, spatial_out: usize, bias: bool },
    /// Parameter-free product of an `m×k` and a `k×n` matrix.
    MatMul { m: usize, k: usize, n: usize },
    Attention { n_q: usize, n_k: usize, d: usize },
    /// Free-standing parameters with no arithmetic of their own.
    Params { count: usize },
}

const KINDS: [&str; 5] = ["linear", "conv", "mat_mul", "attention", "params"];

impl LayerSpec {
    pub fn flops(&self) -> u64 {
        let u = |x: usize| x as u64;
        match *self {
            LayerSpec::Linear { inputs, outputs, rows, .. } => 2 * u(inputs) * u(outputs) * u(rows),
            LayerSpec::Conv { kernel, c_in, c_out, spatial_out, .. } => 2 * u(kernel) * u(c_in) * u(c_out) * u(spatial_out),
            LayerSpec::MatMul { m, k, n } => 2 * u(m) * u(k) * u(n),
            LayerSpec::Attention { n_q, n_k, d } => 2 * (2 * u(n_q) * u(n_k) * u(d)),
            LayerSpec::Params { .. } => 0,
        }
    }

    pub fn params(&self) -> u64 {
        let u = |x: usize| x as u64;
        match *self {
            LayerSpec::Linear { inputs, outputs, bias, .. } => u(inputs) * u(outputs) + if bias { u(outputs) } else { 0 },
            LayerSpec::Conv { kernel, c_in, c_out, bias, .. } => u(kernel) * u(c_in) * u(c_out) + if bias { u(c_out) } else { 0 },
            LayerSpec::MatMul { .. } | LayerSpec::Attention { .. } => 0,
            LayerSpec::Params { count } => u(count),
        }
    }

    /// Parses one `{"kind": ..., ...}` object.
    pub fn from_json(v: &Value) -> Result<Self> {
        let kind = v.get("kind").and_then(Value::as_str).unwrap_or("<missing>");
        if !KINDS.contains(&kind) {
            return Err(Error::UnknownLayer(kind.to_string()));
        }
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Summed `(flops, params)` over a layer list.
pub fn total(layers: &[LayerSpec]) -> (u64, u64) {
    layers.iter().fold((0, 0), |(f, p), l| (f + l.flops(), p + l.params()))
}

/// Totals for a JSON array of layer objects.
pub fn total_from_json(v: &Value) -> Result<(u64, u64)> {
    let arr = v.as_array().ok_or_else(|| Error::UnknownLayer("expected an array of layers".into()))?;
    let layers = arr.iter().map(LayerSpec::from_json).collect::<Result<Vec<_>>>()?;
    Ok(total(&layers))
}
