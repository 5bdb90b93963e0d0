//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDTR" | version u16 | entry count u32
//! per entry: path len u16 | UTF-8 path | partition u8 | rank u8 | dims u32 × rank | f64 × numel
//! ```

use std::path::Path;

use super::params::{ParamTree, Partition};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDTR";
pub const VERSION: u16 = 1;
/// Magic, version and entry count.
pub const HEADER_BYTES: usize = 4 + 2 + 4;

/// Bytes an entry occupies besides its raw values.
pub fn entry_overhead(path: &str, rank: usize) -> usize {
    2 + path.len() + 1 + 1 + 4 * rank
}

pub fn encode(tree: &ParamTree) -> Vec<u8> {
    let body: usize = tree.iter().map(|(p, e)| entry_overhead(p, e.tensor.rank()) + 8 * e.numel()).sum();
    let mut out = Vec::with_capacity(HEADER_BYTES + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tree.len() as u32).to_le_bytes());
    for (path, e) in tree.iter() {
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(e.partition.tag());
        out.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
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
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamTree> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut tree = ParamTree::new();
    for _ in 0..count {
        let len = r.u16("path length")? as usize;
        let path = std::str::from_utf8(r.take(len, "path")?)
            .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?
            .to_string();
        let tag = r.u8("partition")?;
        let partition =
            Partition::from_tag(tag).ok_or_else(|| Error::Format(format!("`{path}`: unknown partition tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("`{path}`: {e}")))?;
        tree.insert(path, t, partition).map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(tree)
}

pub fn save(tree: &ParamTree, path: &Path) -> Result<()> {
    std::fs::write(path, encode(tree)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamTree> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
