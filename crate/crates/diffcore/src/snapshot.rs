//! Binary parameter snapshots.
//!
//! Layout: the 7-byte magic `CONDYN1`, then one record per parameter in
//! name order: name length (`u32` LE), UTF-8 name, rank (`u32` LE), each
//! dimension (`u32` LE), then the values as `f64` LE. The file ends exactly
//! after the last record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{DiffError, ParameterSet, Result, Tensor};

pub const MAGIC: &[u8; 7] = b"CONDYN1";

pub fn encode(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DiffError::Snapshot(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(DiffError::Snapshot("bad magic".into()));
    }
    let mut params = ParameterSet::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| DiffError::Snapshot("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if rank == 0 {
            return Err(DiffError::Snapshot(format!("`{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DiffError::Snapshot(format!("`{name}` shape overflows")))?;
        let raw = cur.take(count.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if params.contains(&name) {
            return Err(DiffError::Snapshot(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::new(shape, data).map_err(|e| DiffError::Snapshot(format!("`{name}`: {e}")))?;
        params.insert(name, t);
    }
    Ok(params)
}

pub fn save(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(params))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}
