use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const FMAT_MAGIC: &[u8; 4] = b"FMAT";

/// Frame-by-dimension feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<S> {
    pub frames: Tensor<S>,
    pub hop_ms: u32,
    pub id: String,
}

impl<S: Real> FeatureMatrix<S> {
    pub fn new(frames: Tensor<S>, hop_ms: u32, id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::invalid("feature matrix", format!("expected T×D, got {:?}", frames.shape())));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            frames,
            hop_ms,
            id: id.into(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[S] {
        self.frames.row(t)
    }
}

/// Keeps even-indexed frames of a 10 ms feature stream, giving a 20 ms stream.
pub fn frame_align_20ms<S: Real>(f: &FeatureMatrix<S>) -> Result<FeatureMatrix<S>> {
    if f.hop_ms != 10 {
        return Err(Error::invalid("frame_align_20ms", format!("input hop is {} ms, expected 10", f.hop_ms)));
    }
    let (t, d) = (f.num_frames(), f.dim());
    let rows: Vec<&[S]> = (0..t).step_by(2).map(|i| f.row(i)).collect();
    let frames = if rows.is_empty() {
        Tensor::zeros(&[0, d])
    } else {
        Tensor::from_rows(&rows, d)?
    };
    FeatureMatrix::new(frames, 20, f.id.clone())
}

/// Writes `FMAT`, `u32` T, `u32` D, then `f64` values row-major (little-endian).
pub fn write_fmat<S: Real>(path: &Path, f: &FeatureMatrix<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * f.frames.numel());
    buf.extend_from_slice(FMAT_MAGIC);
    buf.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for &v in f.frames.data() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    crate::util::write_atomic(path, &buf)
}

/// Reads an `FMAT` dump; the hop is not stored in the file and must be supplied.
pub fn read_fmat<S: Real>(path: &Path, hop_ms: u32, id: impl Into<String>) -> Result<FeatureMatrix<S>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |field, detail: String| Error::Format {
        path: path.display().to_string(),
        field,
        detail,
    };
    if buf.len() < 12 || &buf[0..4] != FMAT_MAGIC {
        return Err(bad("magic", "expected FMAT".into()));
    }
    let t = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + 8 * t * d {
        return Err(bad("length", format!("{} bytes for {t}×{d} matrix", buf.len())));
    }
    let data = buf[12..]
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    FeatureMatrix::new(Tensor::new(vec![t, d], data)?, hop_ms, id)
}
