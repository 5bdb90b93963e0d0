//! Binary dataset container.
//!
//! ```text
//! "FKEY" | version u16 | sample count u32
//! per sample: height u32 | width u32 | f64 × (h·w) | box f64 × 4 | label u8 | ffr f64 | ifr f64 | measured u8
//! ```

use std::path::Path;

use super::render::{KeyFrameSample, Measured};
use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FKEY";
pub const VERSION: u16 = 1;

pub fn encode(samples: &[KeyFrameSample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.height() as u32).to_le_bytes());
        out.extend_from_slice(&(s.width() as u32).to_le_bytes());
        for v in s.image.data().iter().chain(&s.bbox()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(s.label() as u8);
        out.extend_from_slice(&s.ffr.to_le_bytes());
        out.extend_from_slice(&s.ifr.to_le_bytes());
        out.push(s.measured.mask());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated dataset while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<KeyFrameSample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a key-frame dataset (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = r.u32("sample count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let n = h.checked_mul(w).filter(|&n| n > 0).ok_or_else(|| Error::Format(format!("sample {i}: bad size {h}x{w}")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?, "pixels")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut bbox = [0.0; 4];
        for v in &mut bbox {
            *v = r.f64("box")?;
        }
        let label = r.u8("label")? as usize;
        let ffr = r.f64("ffr")?;
        let ifr = r.f64("ifr")?;
        let mask = r.u8("measured")?;
        let measured = Measured::from_mask(mask).ok_or_else(|| Error::Format(format!("sample {i}: measured mask {mask}")))?;
        let gt = GroundTruth::single(bbox, label);
        gt.validate(2).map_err(|e| Error::Format(format!("sample {i}: {e}")))?;
        out.push(KeyFrameSample { image: Tensor::new(vec![1, h, w], data)?, gt, ffr, ifr, measured });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after dataset", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(samples: &[KeyFrameSample], path: &Path) -> Result<()> {
    std::fs::write(path, encode(samples)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<KeyFrameSample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
