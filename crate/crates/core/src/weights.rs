//! Little-endian binary weight files.
//!
//! Layout: magic `AMDW`, format version `u32`, tensor count `u32`, then per
//! tensor a `u32` name length, the UTF-8 name, rank `u32`, one `u32` per
//! dimension and the raw `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AmdError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMDW";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered, named tensors as stored in a weight file.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn encode<T: Real>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AmdError::Format(format!(
                "weight file truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<NamedTensors<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(AmdError::Format("bad magic, not a weight file".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(AmdError::Format(format!(
            "unsupported weight format version {}",
            version
        )));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| AmdError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n * 8 > bytes.len() - c.pos {
            return Err(AmdError::Format(format!("tensor {} truncated", name)));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(c.f64()?));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(AmdError::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(tensors))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<NamedTensors<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
