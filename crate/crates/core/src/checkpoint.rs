//! Binary parameter files.
//!
//! Layout, all little-endian: the magic `DSAINCKPT1`, then per array in path
//! order a `u32` path length, the UTF-8 path, a `u32` rank, `rank` `u64`
//! dimensions and the row-major `f64` payload.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::param_specs;
use crate::numerics::Tensor;
use crate::params::ModelParams;

pub const MAGIC: &[u8; 10] = b"DSAINCKPT1";

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (path, p) in params.iter() {
        out.extend((path.len() as u32).to_le_bytes());
        out.extend(path.as_bytes());
        out.extend((p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes every record without checking it against a model.
pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !buf.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing DSAINCKPT1 header".into()));
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(len, "path")?)
            .map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("{path}: shape {shape:?} overflows")))?;
        let data = r
            .take(bytes, &path)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((path, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Decodes `buf` into the parameter layout of `cfg`; every array must be
/// present with the expected shape and no others may appear.
pub fn load_bytes(buf: &[u8], cfg: &ModelConfig) -> Result<ModelParams> {
    let specs = param_specs(cfg);
    let mut params = ModelParams::new();
    for (path, tensor) in from_bytes(buf)? {
        let spec = specs
            .iter()
            .find(|s| s.path == path)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array {path}")))?;
        if tensor.shape() != spec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{path}: shape {:?} does not match {:?}",
                tensor.shape(),
                spec.shape
            )));
        }
        params.insert(path, tensor, spec.padded);
    }
    if let Some(s) = specs.iter().find(|s| !params.contains(&s.path)) {
        return Err(Error::Checkpoint(format!("missing array {}", s.path)));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    load_bytes(&std::fs::read(path)?, cfg)
}
