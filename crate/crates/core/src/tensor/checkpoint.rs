//! Binary parameter files: the magic `USTAW1`, then one record per tensor
//! until end of file. A record is the name length (u32 LE), the UTF-8 name,
//! the rank (u32 LE), each dimension (u32 LE) and the values (f64 LE).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"USTAW1";

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
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
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.bytes.len(),
                "truncated checkpoint record",
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::parse(0, "missing USTAW1 magic"));
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::parse(start + 4, "parameter name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u32()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c <= (bytes.len() - cur.pos) / 8)
            .ok_or_else(|| Error::parse(bytes.len(), "truncated checkpoint values"))?;
        let data = cur
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Check that `loaded` lists exactly the names and shapes of `expected`, in
/// order.
pub fn check_layout(expected: &[(String, Tensor)], loaded: &[(String, Tensor)]) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} tensors, model has {}",
            loaded.len(),
            expected.len()
        )));
    }
    for ((en, et), (ln, lt)) in expected.iter().zip(loaded) {
        if en != ln {
            return Err(Error::Shape(format!(
                "checkpoint tensor {ln}, expected {en}"
            )));
        }
        if et.shape() != lt.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {ln} has shape {:?}, expected {:?}",
                lt.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}
