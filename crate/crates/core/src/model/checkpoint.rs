//! Binary checkpoint container.
//!
//! | field | encoding |
//! |-------|----------|
//! | magic | `GLOTCKPT` |
//! | version | u32 |
//! | config | u32 byte length, then `key=value` lines (UTF-8) |
//! | tensors, to end of file | u32 name length, name, u32 rank, rank × u64 dims, f64 values |
//!
//! Integers and floats are little-endian. Tensors appear in parameter order.

use std::fs;
use std::path::Path;

use super::{GlotConfig, GlotModel};
use crate::error::{GlotError, Result};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLOTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize, field: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GlotError::format(field, format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &GlotModel) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config().to_kv();
    put_u32(&mut out, cfg.len(), "config")?;
    out.extend_from_slice(cfg.as_bytes());
    for (_, name, t) in model.params().iter() {
        put_u32(&mut out, name.len(), "name")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank(), "rank")?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GlotError::format(field, format!("truncated at byte {}, need {n} more", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, field: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, field)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| GlotError::format(field, format!("{v} exceeds usize")))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Parses a checkpoint into the stored configuration and parameters,
/// without checking them against a model layout.
pub fn decode(bytes: &[u8]) -> Result<(GlotConfig, ParamStore)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(GlotError::format("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(GlotError::format("version", format!("unsupported version {version}")));
    }
    let len = r.u32("config")?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| GlotError::format("config", "invalid UTF-8"))?;
    let config = GlotConfig::from_kv(text)?;
    let mut store = ParamStore::new();
    while !r.done() {
        let n = r.u32("name")?;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| GlotError::format("name", "invalid UTF-8"))?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| GlotError::format("dims", "overflow"))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| GlotError::format("values", "overflow"))?, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| GlotError::format(format!("tensor {name}"), e.to_string()))?;
        store.add(name, t);
    }
    Ok((config, store))
}

pub fn from_bytes(bytes: &[u8]) -> Result<GlotModel> {
    let (config, store) = decode(bytes)?;
    let mut model = GlotModel::new(config, 0)?;
    model.load_params(store)?;
    Ok(model)
}

pub fn save(model: &GlotModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| GlotError::io(path, e))
}

pub fn load(path: &Path) -> Result<GlotModel> {
    let bytes = fs::read(path).map_err(|e| GlotError::io(path, e))?;
    from_bytes(&bytes)
}
