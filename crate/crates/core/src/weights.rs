//! Binary weight files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"RFRW" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8 | dims u32 * rank | data
//! ```
//!
//! Tensors are written in sorted-name order, so identical stores produce
//! identical bytes. Running statistics are stored alongside parameters.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Result, RfrError};
use crate::net::{Architecture, RfrNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFRW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, entry) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let dims = entry.value.shape().0;
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(RfrError::Format(format!(
                "weight file truncated while reading {field} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Overwrite every entry of `store` from `bytes`. The file must list
/// exactly the entries of `store`, with matching shapes.
pub fn decode_into(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(RfrError::Format("bad magic: not an RFRW weight file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(RfrError::Format(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = BTreeSet::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| RfrError::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(RfrError::Format(format!("tensor `{name}`: unknown dtype code {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        if rank != 4 {
            return Err(RfrError::Format(format!("tensor `{name}`: rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let entry = store
            .entry_mut(&name)
            .map_err(|_| RfrError::Format(format!("unknown tensor name `{name}`")))?;
        if entry.value.shape().0 != dims {
            return Err(RfrError::Format(format!(
                "tensor `{name}`: dims {dims:?} do not match expected {:?}",
                entry.value.shape().0
            )));
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entry.value = Tensor::from_vec(dims, data)?;
        if !seen.insert(name.clone()) {
            return Err(RfrError::Format(format!("tensor `{name}` listed twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(RfrError::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    if let Some(missing) = store.names().find(|n| !seen.contains(*n)) {
        return Err(RfrError::Format(format!("missing tensor `{missing}`")));
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| RfrError::io(path, e))
}

/// Build `arch`'s parameter layout and fill it from the file at `path`.
pub fn load(path: impl AsRef<Path>, arch: Architecture) -> Result<RfrNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RfrError::io(path, e))?;
    let mut params = arch.init_params(0)?;
    decode_into(&bytes, &mut params)?;
    Ok(RfrNet { arch, params })
}
