//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "MMCKPT01"
//! config_len     u32
//! config         config_len bytes, canonical JSON of ModelConfig
//! config_hash    32 bytes, SHA-256 of the config bytes
//! tensor_count   u32
//! per tensor:
//!   name_len     u32
//!   name         name_len bytes, UTF-8
//!   ndim         u32
//!   dims         ndim x u64
//!   data         prod(dims) x f32, row-major
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DualEncoderModel, ModelConfig, ModelError, ParamSet, Real, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMCKPT01";

fn canonical_config(config: &ModelConfig) -> Vec<u8> {
    serde_json::to_vec(config).expect("model config serializes")
}

/// Hex SHA-256 of the canonical config serialization.
pub fn config_hash(config: &ModelConfig) -> String {
    to_hex(&Sha256::digest(canonical_config(config)))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn snapshot_to_bytes<T: Real>(model: &DualEncoderModel<T>) -> Vec<u8> {
    let config = canonical_config(model.config());
    let mut out = Vec::with_capacity(64 + model.params().num_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&Sha256::digest(&config));
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, name, tensor) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for d in tensor.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in tensor.as_standard_layout().iter() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn snapshot<T: Real>(model: &DualEncoderModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, snapshot_to_bytes(model))?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ModelError::Corrupt("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| ModelError::Corrupt("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| ModelError::Corrupt("truncated".into()))?;
    Ok(b)
}

/// Rebuilds an `f32` model from checkpoint bytes.
///
/// When `expected` is given, the stored architecture must equal it.
pub fn restore_from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<DualEncoderModel<f32>> {
    let mut r = Cursor::new(bytes);
    let magic = read_bytes(&mut r, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let config_len = read_u32(&mut r)? as usize;
    let config_bytes = read_bytes(&mut r, config_len)?;
    let stored_hash = read_bytes(&mut r, 32)?;
    if Sha256::digest(&config_bytes).as_slice() != stored_hash.as_slice() {
        return Err(ModelError::Corrupt("config hash does not match config".into()));
    }
    let config: ModelConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| ModelError::Corrupt(format!("config: {e}")))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(ModelError::Incompatible(format!(
                "checkpoint architecture {} differs from requested {}",
                String::from_utf8_lossy(&config_bytes),
                String::from_utf8_lossy(&canonical_config(exp))
            )));
        }
    }
    let mut model = DualEncoderModel::<f32>::new(config, 0)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.params().len() {
        return Err(ModelError::Incompatible(format!(
            "checkpoint holds {count} tensors, architecture has {}",
            model.params().len()
        )));
    }
    let mut loaded = ParamSet::<f32>::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = read_bytes(&mut r, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.push_raw(name, &dims, data);
    }
    for ((_, a, ta), (_, b, tb)) in model.params().iter().zip(loaded.iter()) {
        if a != b || ta.shape() != tb.shape() {
            return Err(ModelError::Incompatible(format!(
                "tensor `{b}` {:?} does not match architecture tensor `{a}` {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    if r.position() as usize != bytes.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    model.replace_params(loaded);
    Ok(model)
}

pub fn restore(path: &Path, expected: Option<&ModelConfig>) -> Result<DualEncoderModel<f32>> {
    let bytes = std::fs::read(path)?;
    restore_from_bytes(&bytes, expected)
}
