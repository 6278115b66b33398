//! Binary per-sample feature files.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `GLOTFEAT` |
//! | 4     | version (u32) |
//! | 4     | frame count F (u32) |
//! | 4     | feature width (u32) |
//! | 8·F·w | values, f64 row-major |

use std::fs;
use std::path::Path;

use crate::error::{GlotError, Result};
use crate::numcore::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"GLOTFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_features(m: &Tensor) -> Result<Vec<u8>> {
    let (f, w) = m.require_matrix("encode_features")?;
    if !m.is_finite() {
        return Err(GlotError::NonFinite { op: "encode_features" });
    }
    let dim = |v: usize, name: &str| u32::try_from(v).map_err(|_| GlotError::format(name, format!("{v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(f, "frames")?.to_le_bytes());
    out.extend_from_slice(&dim(w, "feat_dim")?.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(GlotError::format("header", format!("{} bytes, need {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(GlotError::format("magic", format!("{:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(8);
    if version != FEATURE_VERSION {
        return Err(GlotError::format("version", format!("unsupported version {version}")));
    }
    let (f, w) = (word(12) as usize, word(16) as usize);
    if f == 0 || w == 0 {
        return Err(GlotError::format("shape", format!("{f}x{w} has an empty axis")));
    }
    let body = &bytes[HEADER_LEN..];
    let expected = f.checked_mul(w).and_then(|n| n.checked_mul(8));
    if expected != Some(body.len()) {
        return Err(GlotError::format("values", format!("{f}x{w} needs {} bytes, found {}", f * w * 8, body.len())));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(GlotError::format("values", "non-finite value"));
    }
    Tensor::matrix(f, w, data)
}

pub fn write_feature_file(path: &Path, m: &Tensor) -> Result<()> {
    let bytes = encode_features(m)?;
    fs::write(path, bytes).map_err(|e| GlotError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| GlotError::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        GlotError::Format { field, detail } => {
            GlotError::Format { field, detail: format!("{detail} in {}", path.display()) }
        }
        other => other,
    })
}
