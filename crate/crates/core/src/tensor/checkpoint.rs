//! Binary parameter checkpoints.
//!
//! Layout: the ASCII line `OFNET-CKPT v1 <n_tensors>\n`, then for each tensor
//! its name length, the UTF-8 name, its rank and extents (all little-endian
//! `u64`), followed by the raw little-endian `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "OFNET-CKPT v1";

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = format!("{MAGIC} {}\n", tensors.len()).into_bytes();
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: String| Error::format(path, msg);
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing checkpoint header".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| bad("header is not ASCII".into()))?;
    let count: usize = header
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(format!("unrecognized header {header:?}")))?;

    let mut r = Reader {
        bytes,
        pos: newline + 1,
    };
    let truncated = |what: &str, i: usize| bad(format!("truncated while reading {what} of tensor {i}"));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u64().ok_or_else(|| truncated("name length", i))? as usize;
        let name = r.take(name_len).ok_or_else(|| truncated("name", i))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| bad(format!("tensor {i} name is not UTF-8")))?;
        let rank = r.u64().ok_or_else(|| truncated("rank", i))? as usize;
        if rank > 8 {
            return Err(bad(format!("tensor {name:?} has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(|| truncated("extents", i))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r
            .take(n.checked_mul(8).ok_or_else(|| bad("extent overflow".into()))?)
            .ok_or_else(|| truncated("values", i))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode(tensors);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
