//! Self-describing checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "TSALCKPT"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen bytes of JSON {spec, seed, epoch, num_params}
//! params   num_params × f64
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchitectureSpec, Classifier};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSALCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub epoch: usize,
    pub num_params: usize,
}

pub fn encode(model: &Classifier, epoch: usize) -> Vec<u8> {
    let header = CheckpointHeader {
        spec: model.spec().clone(),
        seed: model.seed(),
        epoch,
        num_params: model.num_parameters(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * header.num_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.parameters() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Classifier, CheckpointHeader)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    let blob = &bytes[16 + hlen..];
    if blob.len() != header.num_params * 8 {
        return Err(bad("parameter blob length does not match header"));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = Classifier::from_parameters(&header.spec, header.seed, params)?;
    Ok((model, header))
}

/// Writes atomically and returns the SHA-256 of the written bytes.
pub fn save(model: &Classifier, epoch: usize, path: &Path) -> Result<String> {
    let bytes = encode(model, epoch);
    crate::io_util::write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load(path: &Path) -> Result<(Classifier, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
