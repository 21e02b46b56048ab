//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    b"MSVT"
//! version  u32
//! config   u32 length + UTF-8 TOML text
//! hash     32 bytes, SHA-256 of the config text
//! count    u32
//! tensors  count x { u32 path length, path, u8 dtype (1 = f64),
//!                    u32 rank, rank x u64 dims, raw values }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSVT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let store = model.store();
    let config = model.config().to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&Sha256::digest(config.as_bytes()));
    let tensors: Vec<(&str, &Tensor)> = store.params().chain(store.buffers()).collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (path, t) in tensors {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds a model from checkpoint bytes. With `expected`, the stored
/// architecture must match it.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes, not an MSVT checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let len = r.u32("config length")? as usize;
    let config_bytes = r.take(len, "config")?;
    let hash = r.take(32, "config hash")?;
    if Sha256::digest(config_bytes).as_slice() != hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let cfg = ModelConfig::from_toml(text)?;
    if let Some(exp) = expected {
        if !exp.same_architecture(&cfg) {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture (`{}`, dims {:?}, depths {:?}) does not match the \
                 requested config (`{}`, dims {:?}, depths {:?})",
                cfg.name, cfg.dims, cfg.depths, exp.name, exp.dims, exp.depths
            )));
        }
    }
    let mut model = build_model(&cfg)?;
    let count = r.u32("tensor count")? as usize;
    let expected_count = model.store().params().count() + model.store().buffers().count();
    if count != expected_count {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, model has {expected_count}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let plen = r.u32("tensor path length")? as usize;
        let path = std::str::from_utf8(r.take(plen, "tensor path")?)
            .map_err(|_| Error::Checkpoint("tensor path is not UTF-8".into()))?
            .to_string();
        if !seen.insert(path.clone()) {
            return Err(Error::Checkpoint(format!("tensor `{path}` appears twice")));
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("tensor `{path}` has unknown dtype {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{path}` is too large")))?;
        let raw = r.take(n.saturating_mul(8), &format!("tensor `{path}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.store_mut().assign(&path, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    decode(&fs::read(path)?, expected)
}
