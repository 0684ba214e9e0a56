//! `AEFM` feature-map container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AEFM"
//! 4       4     version (u32 LE, = 1)
//! 8       4     N  sample count (u32 LE)
//! 12      4     K  channels     (u32 LE)
//! 16      4     H  spatial side (u32 LE)
//! 20      4·N·K·H·H  f32 LE values, sample → channel → row → column
//! ```

use std::fs;
use std::path::Path;

use super::DataError;
use crate::network::FeatureMap;

pub const MAGIC: &[u8; 4] = b"AEFM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Total file length for `n` maps of shape `k × h × h`.
pub fn encoded_len(n: usize, k: usize, h: usize) -> usize {
    HEADER_LEN + 4 * n * k * h * h
}

pub fn encode(maps: &[FeatureMap]) -> Result<Vec<u8>, DataError> {
    let (k, h) = match maps.first() {
        Some(m) => (m.channels(), m.size()),
        None => return Err(DataError::Invalid("cannot encode an empty feature-map list".into())),
    };
    if let Some(i) = maps.iter().position(|m| m.channels() != k || m.size() != h) {
        return Err(DataError::Invalid(format!("feature map {i} has a different shape than map 0")));
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| DataError::Invalid(format!("{what} = {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(encoded_len(maps.len(), k, h));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(maps.len(), "N")?.to_le_bytes());
    out.extend_from_slice(&to_u32(k, "K")?.to_le_bytes());
    out.extend_from_slice(&to_u32(h, "H")?.to_le_bytes());
    for m in maps {
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<FeatureMap>, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = read_u32(bytes, 8) as usize;
    let k = read_u32(bytes, 12) as usize;
    let h = read_u32(bytes, 16) as usize;
    if k == 0 || h == 0 {
        return Err(DataError::Invalid(format!("header declares K = {k}, H = {h}; both must be >= 1")));
    }
    let expected = encoded_len(n, k, h);
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes { expected, actual: bytes.len() });
    }
    let per_map = k * h * h;
    bytes[HEADER_LEN..]
        .chunks_exact(4 * per_map)
        .enumerate()
        .map(|(i, chunk)| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4-byte slice"))))
                .collect();
            FeatureMap::new(k, h, data).map_err(|e| DataError::Invalid(format!("sample {i}: {e}")))
        })
        .collect()
}

pub fn write_feature_maps(path: impl AsRef<Path>, maps: &[FeatureMap]) -> Result<(), DataError> {
    fs::write(path, encode(maps)?)?;
    Ok(())
}

pub fn read_feature_maps(path: impl AsRef<Path>) -> Result<Vec<FeatureMap>, DataError> {
    decode(&fs::read(path)?)
}
