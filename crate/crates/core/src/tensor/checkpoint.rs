//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "VTFPAR01"
//! count
//! count x { name_len, name (utf-8), rank, dims[rank], f32 values }
//! crc32 of every preceding byte
//! ```
//!
//! Entries are written in sorted name order, so identical parameters give
//! identical files.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VTFPAR01";

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.num_values() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for name in store.names() {
        let Some(id) = store.id(name) else { continue };
        let t = store.tensor(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bad = |message: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(bad("missing VTFPAR01 header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(bad("crc32 mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let truncated = || bad("truncated");
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad("parameter name is not utf-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(bad(&format!("duplicate parameter {name:?}")));
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes before crc"));
    }
    Ok(out)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
