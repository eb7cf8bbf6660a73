//! Binary array container for image patches.
//!
//! ```text
//! magic   8 bytes  "MMPATCH1"
//! dtype   u8       1 = f32, 2 = f64, 3 = u16, 4 = u8
//! ndim    u8       always 3 for patches (C, H, W)
//! dims    ndim x u32 little-endian
//! data    row-major little-endian values
//! ```
//!
//! Non-`f32` payloads are converted to `f32` on read.

use std::path::Path;

use ndarray::Array3;

use super::{DataError, Image, Result};

pub const PATCH_MAGIC: &[u8; 8] = b"MMPATCH1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U16 = 3,
    U8 = 4,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U16),
            4 => Some(DType::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

/// Serializes a patch as `f32`.
pub fn encode_patch(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 2 + 12 + image.len() * 4);
    out.extend_from_slice(PATCH_MAGIC);
    out.push(DType::F32 as u8);
    out.push(3);
    for d in image.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in image.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_patch(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_patch(image))?;
    Ok(())
}

pub fn decode_patch(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |reason: &str| DataError::MalformedPatch {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..8] != PATCH_MAGIC {
        return Err(bad("missing magic"));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| bad("unknown dtype code"))?;
    let ndim = bytes[9] as usize;
    if ndim != 3 {
        return Err(bad("patches must be 3-dimensional (C, H, W)"));
    }
    let header = 10 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[10..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != numel * dtype.size() {
        return Err(bad("body length does not match shape"));
    }
    let data: Vec<f32> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
        DType::U16 => body
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::U8 => body.iter().map(|b| f32::from(*b)).collect(),
    };
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).map_err(|e| bad(&e.to_string()))
}

pub fn read_patch(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|_| DataError::MalformedPatch {
        path: path.to_path_buf(),
        reason: "cannot read file".into(),
    })?;
    decode_patch(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let img = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f32 * 0.5);
        let bytes = encode_patch(&img);
        assert_eq!(&bytes[..8], PATCH_MAGIC);
        assert_eq!(decode_patch(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn u16_payload_is_widened() {
        let mut bytes = PATCH_MAGIC.to_vec();
        bytes.push(DType::U16 as u8);
        bytes.push(3);
        for d in [1u32, 1, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&7u16.to_le_bytes());
        bytes.extend_from_slice(&1000u16.to_le_bytes());
        let img = decode_patch(&bytes, Path::new("x")).unwrap();
        assert_eq!(img.as_slice().unwrap(), &[7.0, 1000.0]);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let img = Array3::<f32>::zeros((1, 2, 2));
        let mut bytes = encode_patch(&img);
        bytes.pop();
        assert!(matches!(decode_patch(&bytes, Path::new("x")), Err(DataError::MalformedPatch { .. })));
    }
}
