//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `DCACKPT1`, a little-endian `u64` header length,
//! a JSON header (config, iteration, tensor index) and then every tensor's
//! `f32` values in little-endian order. Files are byte-for-byte reproducible
//! for equal inputs, so their SHA-256 digest identifies a run.

use std::fs;
use std::path::Path;

use dca_tensor::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DcaError, Result};

pub const MAGIC: &[u8; 8] = b"DCACKPT1";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "dcackpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: usize,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, ParamKind, Tensor<f32>)>,
}

pub fn encode(params: &ParamStore<f32>, config: &serde_json::Value, iteration: usize) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for id in params.ids() {
        let t = params.get(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            buffer: params.kind(id) == ParamKind::Buffer,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header { version: FORMAT_VERSION, iteration, config: config.clone(), tensors })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in params.ids() {
        for v in params.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| DcaError::BadCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let data = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let raw = data.get(4 * e.offset..4 * (e.offset + len)).ok_or_else(|| bad("truncated tensor data"))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let kind = if e.buffer { ParamKind::Buffer } else { ParamKind::Trainable };
        tensors.push((e.name, kind, Tensor::from_vec(&e.shape, values)?));
    }
    Ok(Checkpoint { iteration: header.iteration, config: header.config, tensors })
}

/// Writes the checkpoint and returns its SHA-256 digest.
pub fn save(path: &Path, params: &ParamStore<f32>, config: &serde_json::Value, iteration: usize) -> Result<String> {
    let bytes = encode(params, config, iteration)?;
    fs::write(path, &bytes)?;
    Ok(digest(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(&fs::read(path)?))
}

impl Checkpoint {
    /// Copies every tensor into `params`. The name sets must match exactly;
    /// otherwise the error lists what is missing and what is unexpected.
    pub fn restore_into(&self, params: &mut ParamStore<f32>) -> Result<()> {
        let stored: std::collections::BTreeSet<&str> = self.tensors.iter().map(|t| t.0.as_str()).collect();
        let wanted: std::collections::BTreeSet<&str> = params.ids().map(|id| params.name(id)).collect();
        let missing: Vec<_> = wanted.difference(&stored).copied().collect();
        let unexpected: Vec<_> = stored.difference(&wanted).copied().collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(DcaError::CheckpointMismatch(format!(
                "missing from checkpoint: {missing:?}; not in model: {unexpected:?}"
            )));
        }
        for (name, _, t) in &self.tensors {
            let id = params.id(name)?;
            if params.get(id).shape() != t.shape() {
                return Err(DcaError::CheckpointMismatch(format!(
                    "`{name}` has shape {:?} in the checkpoint and {:?} in the model",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            params.set(id, t.clone())?;
        }
        Ok(())
    }
}
