//! Binary parameter container.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "CRTCKPT1" | count | count × ( name_len | name (UTF-8) | rank | extents × rank | f64 LE payload )
//! ```
//!
//! Entries are written in name order, so equal stores produce equal bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRTCKPT1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let bytes: &'a [u8] = self.bytes;
        if bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn size(&mut self, what: &str, limit: usize) -> Result<usize> {
        let start = self.pos;
        let v = self.u64(what)?;
        if v > limit as u64 {
            self.pos = start;
            return Err(self.fail(format!("{what} {v} exceeds remaining input")));
        }
        Ok(v as usize)
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(8, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.fail("bad magic, expected CRTCKPT1"));
    }
    let count = cur.size("entry count", bytes.len())?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.size("name length", bytes.len())?;
        let start = cur.pos;
        let name = match std::str::from_utf8(cur.take(len, "name")?) {
            Ok(s) => s.to_owned(),
            Err(_) => {
                cur.pos = start;
                return Err(cur.fail("entry name is not UTF-8"));
            }
        };
        let rank = cur.size("rank", 16)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.size("extent", bytes.len())?);
        }
        let at = cur.pos;
        let bytes_needed = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| cur.fail(format!("entry `{name}` is too large")))?;
        let payload = cur.take(bytes_needed, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| {
            cur.pos = at;
            cur.fail(format!("entry `{name}`: {e}"))
        })?;
        store.insert(name, t);
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail("trailing bytes after last entry"));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
