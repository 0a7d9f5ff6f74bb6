//! Binary weight files.
//!
//! Layout: the 8-byte magic `LATCKPT1`, a little-endian `u64` header length,
//! a JSON header (kind, parameter names and shapes, config hash, seed,
//! free-form metadata), then the live weights and the EMA weights as
//! little-endian `f64` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet};

const MAGIC: &[u8; 8] = b"LATCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    pub config_hash: String,
    pub seed: u64,
    pub meta: serde_json::Value,
}

pub fn to_bytes(header: &CheckpointHeader, live: &ParamSet, ema: &ParamSet) -> Result<Vec<u8>> {
    if live.shapes() != header.shapes || ema.shapes() != header.shapes {
        return Err(Error::Checkpoint("parameter shapes disagree with the header".into()));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 16 * live.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in live.flatten().into_iter().chain(ema.flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet, ParamSet)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.names.len() != header.shapes.len() {
        return Err(bad("header names and shapes differ in length"));
    }
    let count: usize = header.shapes.iter().map(|(r, c)| r * c).sum();
    let floats = &bytes[16 + hlen..];
    if floats.len() != 16 * count {
        return Err(bad("weight payload has the wrong length"));
    }
    let values: Vec<f64> = floats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let build = |flat: &[f64]| -> Result<ParamSet> {
        let mut p = ParamSet::new();
        let mut at = 0;
        for (n, &(r, c)) in header.names.iter().zip(&header.shapes) {
            p.push(n.clone(), Matrix::new(r, c, flat[at..at + r * c].to_vec())?);
            at += r * c;
        }
        Ok(p)
    };
    let live = build(&values[..count])?;
    let ema = build(&values[count..])?;
    Ok((header, live, ema))
}

pub fn save(path: impl AsRef<Path>, header: &CheckpointHeader, live: &ParamSet, ema: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(header, live, ema)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamSet, ParamSet)> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
