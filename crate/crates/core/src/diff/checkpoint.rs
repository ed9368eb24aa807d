//! Parameter checkpoints.
//!
//! Layout: `u64` little-endian header length, the JSON header, then the raw
//! little-endian tensor data. Each header entry's `offset` is in bytes from
//! the start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::params::ParamStore;
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "lctt-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

pub fn encode(params: &ParamStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f64".into(), offset });
        offset += 8 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header { version: CHECKPOINT_VERSION.into(), tensors: entries })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 8 {
        return Err(bad("file too short"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let data_start =
        8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version `{}`", header.version)));
    }
    let data = &bytes[data_start..];
    let mut params = ParamStore::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(Error::Checkpoint(format!("`{}`: unsupported dtype `{other}`", e.name))),
        };
        let start = e.offset as usize;
        let end = start + numel * width;
        let raw = data.get(start..end).ok_or_else(|| Error::Checkpoint(format!("`{}`: data out of range", e.name)))?;
        let values = if width == 8 {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        params.insert(e.name, Tensor::new(e.shape, values)?);
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}
