//! Flat binary parameter files.
//!
//! Layout (little-endian): magic `THBT`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u32` dims, `f64` values.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"THBT";
pub const VERSION: u32 = 1;

pub fn encode_entries<S: Real>(entries: &[(String, Tensor<S>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    buf
}

/// Writes entries atomically (temporary file, then rename).
pub fn write_entries<S: Real>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<()> {
    crate::util::write_atomic(path, &encode_entries(entries))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                field,
                detail: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode_entries<S: Real>(buf: &[u8], path: &str) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader {
        buf,
        pos: 0,
        path: path.to_string(),
    };
    let fmt = |field, detail: String| Error::Format {
        path: path.to_string(),
        field,
        detail,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(fmt("magic", "expected THBT".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(fmt("version", format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| fmt("name", e.to_string()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::lit(r.f64("values")?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(fmt("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn read_entries<S: Real>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&buf, &path.display().to_string())
}
