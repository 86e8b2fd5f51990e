//! Weight container:
//!
//! ```text
//! "RAPT" | version: u32 LE | manifest_len: u64 LE | manifest JSON
//!        | payload (little-endian IEEE-754) | CRC-32 of payload: u32 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{RaptError, Result};
use crate::model::{ModelConfig, Normalizer, RaptModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RAPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model_config: ModelConfig,
    pub normalizer: Normalizer,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: u64,
}

fn corrupt(msg: impl Into<String>) -> RaptError {
    RaptError::Checkpoint(msg.into())
}

/// Serializes a model. Parameters are written in name order.
pub fn to_bytes(model: &RaptModel, dtype: Dtype) -> Result<Vec<u8>> {
    model.validate()?;
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in &model.params {
        let offset = payload.len() as u64;
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => t.data().iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype,
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        model_config: model.config.clone(),
        normalizer: model.norm.clone(),
        tensors,
        payload_len: payload.len() as u64,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Parses and verifies a checkpoint.
pub fn from_bytes(bytes: &[u8]) -> Result<(RaptModel, Manifest)> {
    if bytes.len() < HEADER_LEN + 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a RAPT checkpoint (bad magic or truncated header)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    let mlen = usize::try_from(mlen)
        .ok()
        .filter(|&m| m <= body.len().saturating_sub(4))
        .ok_or_else(|| corrupt("manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
    let rest = &body[mlen..];
    let (payload, crc) = rest.split_at(rest.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if payload.len() as u64 != manifest.payload_len || stored != computed {
        return Err(RaptError::Crc { stored, computed });
    }

    let mut params = ParamSet::new();
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.length).ok_or_else(|| corrupt("tensor span overflows"))?;
        if end > manifest.payload_len || e.length != (n * e.dtype.size()) as u64 {
            return Err(corrupt(format!("tensor {} has an invalid span", e.name)));
        }
        spans.push((e.offset, end));
        let raw = &payload[e.offset as usize..end as usize];
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(corrupt("tensor spans overlap"));
    }
    let model = RaptModel {
        config: manifest.model_config.clone(),
        params,
        norm: manifest.normalizer.clone(),
    };
    model.validate()?;
    Ok((model, manifest))
}

pub fn save_checkpoint(model: &RaptModel, path: &Path, dtype: Dtype) -> Result<()> {
    fs::write(path, to_bytes(model, dtype)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RaptModel> {
    Ok(from_bytes(&fs::read(path)?)?.0)
}
