//! Checkpoint archive.
//!
//! ```text
//! b"TDUNETCK"            magic, 8 bytes
//! u32 LE                 format version
//! u32 LE                 header length in bytes
//! header                 JSON: network config, preprocessor, tensor table
//! payload                little-endian f32 values of every tensor, in table order
//! ```
//!
//! The tensor table lists `name`, `shape`, `role`, and `offset`/`len` in
//! elements from the start of the payload. Batch-norm running statistics are
//! stored as `buffer` entries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelParams, NetworkConfig, ParamRole};
use crate::preprocess::Preprocessor;

pub const MAGIC: &[u8; 8] = b"TDUNETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    preprocessor: Preprocessor,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub preprocessor: Preprocessor,
}

pub fn encode_checkpoint(params: &ModelParams, pre: &Preprocessor) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for p in params.tensors() {
        tensors.push(TensorEntry {
            name: p.name,
            shape: p.tensor.shape().to_vec(),
            role: p.role,
            offset,
            len: p.tensor.len(),
        });
        offset += p.tensor.len();
        for v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        network: params.config.clone(),
        preprocessor: pre.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing TDUNETCK magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let version = word(8);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = word(12) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad(format!("header of {hlen} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != 4 * total {
        return Err(bad(format!(
            "payload holds {} bytes, tensor table needs {}",
            payload.len(),
            4 * total
        )));
    }

    let mut params = ModelParams::build(&header.network, 0).map_err(|e| bad(e.to_string()))?;
    let mut slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(bad(format!(
            "tensor table has {} entries, network needs {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
        if slot.name != entry.name || slot.tensor.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "entry `{}` {:?} does not match expected `{}` {:?}",
                entry.name,
                entry.shape,
                slot.name,
                slot.tensor.shape()
            )));
        }
        if entry.len != slot.tensor.len() || entry.offset + entry.len > total {
            return Err(bad(format!("entry `{}` has an inconsistent extent", entry.name)));
        }
        let src = &payload[4 * entry.offset..4 * (entry.offset + entry.len)];
        for (d, c) in slot.tensor.data_mut().iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    drop(slots);
    Ok(Checkpoint {
        params,
        preprocessor: header.preprocessor,
    })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, pre: &Preprocessor) -> Result<()> {
    fs::write(path, encode_checkpoint(params, pre)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
