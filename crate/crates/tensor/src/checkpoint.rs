//! Binary parameter checkpoints.
//!
//! Layout: `b"ABSW"`, `u32` version, then records until end of file. Each
//! record is a `u16` name length, the UTF-8 name, a `u8` rank, one `u32` per
//! extent and the values as little-endian `f64`. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABSW";
pub const VERSION: u32 = 1;

fn format_err(path: &Path, message: impl Into<String>) -> TensorError {
    TensorError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        let name = name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4) != Some(MAGIC.as_slice()) {
        return Err(format_err(path, "bad magic bytes"));
    }
    let version = cur.u32().ok_or_else(|| format_err(path, "truncated header"))?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let truncated = || format_err(path, format!("truncated record {}", records.len()));
        let len = cur.u16().ok_or_else(truncated)? as usize;
        let name = cur.take(len).ok_or_else(truncated)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| format_err(path, "record name is not UTF-8"))?;
        let rank = cur.u8().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32().ok_or_else(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur
            .take(numel.checked_mul(8).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn write(path: &Path, params: &ParamStore) -> Result<()> {
    let bytes = encode(params.iter());
    let io = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}
