//! `SLUF` feature files: magic, `u32` rows, `u32` cols, then `rows·cols`
//! little-endian `f32` values in row-major order.

use std::path::Path;

use super::{FeatureError, FeatureMatrix};

pub const MAGIC: &[u8; 4] = b"SLUF";
const HEADER_LEN: usize = 12;

pub fn encode_sluf(m: &FeatureMatrix) -> Vec<u8> {
    encode_with_magic(MAGIC, m.rows(), m.cols(), m.data())
}

pub fn decode_sluf(bytes: &[u8]) -> Result<FeatureMatrix, FeatureError> {
    decode_with_magic(bytes, MAGIC)
}

pub(crate) fn encode_with_magic(magic: &[u8; 4], rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_with_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<FeatureMatrix, FeatureError> {
    let format = |offset: usize, message: String| FeatureError::Format { offset, message };
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(format(0, format!("expected magic {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format(bytes.len(), "truncated header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 {
        return Err(format(4, "header declares zero rows".into()));
    }
    if cols == 0 {
        return Err(format(8, "header declares zero columns".into()));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format(4, "header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        let offset = HEADER_LEN + payload.len().min(expected);
        return Err(format(
            offset,
            format!("{rows}x{cols} needs {expected} payload bytes, found {}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    FeatureMatrix::new(rows, cols, data)
}

pub fn save_features(path: &Path, m: &FeatureMatrix) -> Result<(), FeatureError> {
    std::fs::write(path, encode_sluf(m)).map_err(|source| FeatureError::Io { path: path.display().to_string(), source })
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let bytes = std::fs::read(path).map_err(|source| FeatureError::Io { path: path.display().to_string(), source })?;
    decode_sluf(&bytes)
}
