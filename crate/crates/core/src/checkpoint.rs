//! Single-file model archive.
//!
//! Layout: the 8-byte magic `IPAYCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! as raw little-endian values in header order. The header records the
//! model fingerprint, element type, full config, data layout, RGB pixel
//! statistics and each parameter's name, shape and element offset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::IPayModel;
use crate::rgb::ChannelStats;
use crate::scalar::Scalar;
use crate::skeleton::JointLayout;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IPAYCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub fingerprint: String,
    pub dtype: String,
    pub config: Config,
    pub layout: JointLayout,
    pub rgb_stats: ChannelStats,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes<T: Scalar>(model: &IPayModel<T>) -> Vec<u8> {
    let mut offset = 0;
    let params = model
        .params
        .iter()
        .map(|(name, t)| {
            let e = ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.numel();
            e
        })
        .collect();
    let header = CheckpointHeader {
        fingerprint: model.fingerprint(),
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        layout: (*model.base_layout).clone(),
        rgb_stats: model.rgb_stats,
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + offset * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar>(model: &IPayModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, &bytes[20 + len..]))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

fn decode<T: Scalar>(data: &[u8], dtype: &str, offset: usize, n: usize) -> Result<Vec<T>> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    let bytes = data
        .get(offset * width..(offset + n) * width)
        .ok_or_else(|| Error::Checkpoint("truncated parameter data".into()))?;
    Ok(bytes
        .chunks_exact(width)
        .map(|b| if width == 4 { T::of(f32::read_le(b) as f64) } else { T::of(f64::read_le(b)) })
        .collect())
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<IPayModel<T>> {
    let (header, data) = split_header(bytes)?;
    let mut model = IPayModel::<T>::new(&header.config, &header.layout)?;
    let expected = model.fingerprint();
    if expected != header.fingerprint {
        return Err(Error::FingerprintMismatch { expected, found: header.fingerprint });
    }
    if header.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!("{} parameters stored, model has {}", header.params.len(), model.params.len())));
    }
    for e in &header.params {
        let id = model.params.find(&e.name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", e.name)))?;
        if model.params.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter `{}` has shape {:?}", e.name, e.shape)));
        }
        let n = e.shape.iter().product();
        *model.params.get_mut(id) = Tensor::from_vec(e.shape.clone(), decode(data, &header.dtype, e.offset, n)?);
    }
    model.rgb_stats = header.rgb_stats;
    Ok(model)
}

pub fn load<T: Scalar>(path: &Path) -> Result<IPayModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
