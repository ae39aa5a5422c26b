use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

/// Mono audio scaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<S> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Real> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("waveform", "sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn bad(path: &Path, field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        field,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Reads a 16-bit PCM mono RIFF/WAVE file; samples are scaled by 1/32768.
pub fn load_wav<S: Real>(path: &Path) -> Result<Waveform<S>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[0..4] != b"RIFF" {
        return Err(bad(path, "riff id", "missing RIFF header"));
    }
    if &buf[8..12] != b"WAVE" {
        return Err(bad(path, "wave id", "not a WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= buf.len() {
        let id = &buf[pos..pos + 4];
        let size = u32_at(&buf, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= buf.len());
        match id {
            b"fmt " => {
                if size < 16 || end.is_none() {
                    return Err(bad(path, "fmt chunk size", format!("{size}")));
                }
                fmt = Some((
                    u16_at(&buf, body),
                    u16_at(&buf, body + 2),
                    u32_at(&buf, body + 4),
                    u16_at(&buf, body + 14),
                ));
            }
            b"data" => {
                let (format, channels, rate, bits) = fmt.ok_or_else(|| bad(path, "fmt chunk", "data before fmt"))?;
                if format != 1 {
                    return Err(bad(path, "audio format", format!("{format} (expected 1 = PCM)")));
                }
                if channels != 1 {
                    return Err(bad(path, "channels", format!("{channels} (expected mono)")));
                }
                if bits != 16 {
                    return Err(bad(path, "bits per sample", format!("{bits} (expected 16)")));
                }
                let end = end.ok_or_else(|| bad(path, "data chunk size", format!("{size} exceeds file")))?;
                let samples = buf[body..end]
                    .chunks_exact(2)
                    .map(|c| S::lit(i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0))
                    .collect();
                return Waveform::new(samples, rate).map_err(|_| bad(path, "sample rate", "zero"));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(bad(path, "data chunk", "missing"))
}

/// Writes 16-bit PCM mono; samples are clamped to the representable range.
pub fn write_wav<S: Real>(path: &Path, w: &Waveform<S>) -> Result<()> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVEfmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&w.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    crate::util::write_atomic(path, &buf)
}
