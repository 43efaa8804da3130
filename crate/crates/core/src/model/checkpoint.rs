//! Versioned binary checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "GMTCKPT\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   parameter payload, f64 little-endian, in header order
//! ```
//!
//! The header holds the model config, the freeze policy name, free-form
//! string metadata and one entry per parameter (`name`, `shape`, `frozen`,
//! `offset` and `len` counted in f64 values from the payload start).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::ParameterRegistry;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GMTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    policy: Option<String>,
    metadata: BTreeMap<String, String>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub policy: Option<String>,
    pub metadata: BTreeMap<String, String>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ckpt.model.params.len());
    let mut offset = 0;
    for (name, p) in ckpt.model.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            frozen: p.frozen,
            offset,
            len: p.tensor.numel(),
        });
        offset += p.tensor.numel();
    }
    let header = Header {
        config: ckpt.model.config.clone(),
        policy: ckpt.policy.clone(),
        metadata: ckpt.metadata.clone(),
        params: entries,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("encoding header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in ckpt.model.params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("parsing header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[header_end..];
    let mut params = ParameterRegistry::default();
    let mut expected_offset = 0;
    for e in header.params {
        if e.offset != expected_offset || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Checkpoint(format!("inconsistent entry for '{}'", e.name)));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload truncated in '{}'", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?, e.frozen);
        expected_offset += e.len;
    }
    if expected_offset * 8 != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        model: Model {
            config: header.config,
            params,
        },
        policy: header.policy,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
