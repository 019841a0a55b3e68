//! Binary tensor checkpoints.
//!
//! Layout: magic `CMDL`, version `u32`, tensor count `u64`, then per tensor
//! name length `u32`, UTF-8 name, rank `u32`, dims `u64`×rank, dtype tag `u8`
//! (0 = f32) and raw values. All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnblocks::ParamStore;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"CMDL";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u64("tensor count")?;
    let mut store = ParamStore::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dims")? as usize);
        }
        let tag = c.take(1, "dtype")?[0];
        if tag != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name} has unknown dtype tag {tag}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} dims overflow")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store
            .add(name, Tensor::new(dims, data)?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - c.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Copies every tensor of `loaded` into `target`; names and shapes must match
/// exactly, with nothing missing or extra.
pub fn restore_into(target: &mut ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            loaded.len(),
            target.len()
        )));
    }
    for (name, t) in loaded.iter() {
        let id = target
            .id(name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} has no slot in the model")))?;
        target
            .set(id, t.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}
