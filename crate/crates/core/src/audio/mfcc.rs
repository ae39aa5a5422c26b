use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

use super::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub win_ms: f64,
    pub hop_ms: u32,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    /// Append first and second temporal derivatives.
    pub deltas: bool,
    pub log_floor: f64,
    pub f_min: f64,
    /// Upper filter-bank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            win_ms: 25.0,
            hop_ms: 10,
            n_fft: 512,
            n_mels: 26,
            n_ceps: 13,
            deltas: true,
            log_floor: 1e-10,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl MfccConfig {
    pub fn dim(&self) -> usize {
        if self.deltas {
            3 * self.n_ceps
        } else {
            self.n_ceps
        }
    }

    fn geometry(&self, sample_rate: u32) -> Result<(usize, usize)> {
        let win = (self.win_ms * sample_rate as f64 / 1000.0).round() as usize;
        let hop = (self.hop_ms as f64 * sample_rate as f64 / 1000.0).round() as usize;
        if win == 0 || hop == 0 || win > self.n_fft {
            return Err(Error::invalid(
                "mfcc",
                format!("window {win} / hop {hop} samples incompatible with n_fft {}", self.n_fft),
            ));
        }
        Ok((win, hop))
    }
}

/// Number of complete analysis windows.
pub fn num_frames(n_samples: usize, win: usize, hop: usize) -> usize {
    if n_samples < win {
        0
    } else {
        (n_samples - win) / hop + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft/2 + 1` power-spectrum bins, plus each filter's
/// `(lower, center, upper)` edge frequencies in Hz.
pub fn mel_filterbank<S: Real>(cfg: &MfccConfig, sample_rate: u32) -> (Vec<Vec<S>>, Vec<(f64, f64, f64)>) {
    let sr = sample_rate as f64;
    let f_max = cfg.f_max.unwrap_or(sr / 2.0);
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let n_bins = cfg.n_fft / 2 + 1;
    let mut filters = Vec::with_capacity(cfg.n_mels);
    let mut edges = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let row = (0..n_bins)
            .map(|k| {
                let f = k as f64 * sr / cfg.n_fft as f64;
                let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
                S::lit(w)
            })
            .collect();
        filters.push(row);
        edges.push((lo, c, hi));
    }
    (filters, edges)
}

/// Log mel filter-bank energies, one row per complete window (`T × n_mels`).
pub fn log_mel_spectrum<S: Real + FftNum>(w: &Waveform<S>, cfg: &MfccConfig) -> Result<Tensor<S>> {
    let (win, hop) = cfg.geometry(w.sample_rate)?;
    let t = num_frames(w.samples.len(), win, hop);
    let (filters, _) = mel_filterbank::<S>(cfg, w.sample_rate);
    let n_bins = cfg.n_fft / 2 + 1;
    let window: Vec<S> = (0..win)
        .map(|n| {
            let x = 2.0 * std::f64::consts::PI * n as f64 / (win.max(2) - 1) as f64;
            S::lit(0.54 - 0.46 * x.cos())
        })
        .collect();
    let fft = FftPlanner::<S>::new().plan_fft_forward(cfg.n_fft);
    let floor = S::lit(cfg.log_floor);
    let mut out = Vec::with_capacity(t * cfg.n_mels);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); cfg.n_fft];
    let mut power = vec![S::zero(); n_bins];
    for f in 0..t {
        let frame = &w.samples[f * hop..f * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(frame[i] * window[i], S::zero())
            } else {
                Complex::new(S::zero(), S::zero())
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for filt in &filters {
            let e: S = filt.iter().zip(&power).map(|(&a, &b)| a * b).sum();
            out.push(e.max(floor).ln());
        }
    }
    Tensor::new(vec![t, cfg.n_mels], out)
}

/// Orthonormal DCT-II of each row, keeping the first `n_out` coefficients.
fn dct_rows<S: Real>(x: &Tensor<S>, n_out: usize) -> Vec<S> {
    let m = x.cols();
    let basis: Vec<S> = (0..n_out)
        .flat_map(|k| {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m).map(move |j| {
                S::lit(scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
            })
        })
        .collect();
    let mut out = Vec::with_capacity(x.rows() * n_out);
    for r in 0..x.rows() {
        let row = x.row(r);
        for k in 0..n_out {
            out.push(basis[k * m..(k + 1) * m].iter().zip(row).map(|(&b, &v)| b * v).sum());
        }
    }
    out
}

/// Regression deltas over ±2 frames with edge replication.
fn deltas<S: Real>(x: &[S], t: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); t * d];
    let denom = S::lit(10.0); // 2 * (1^2 + 2^2)
    let at = |i: isize, j: usize| x[(i.clamp(0, t as isize - 1) as usize) * d + j];
    for i in 0..t as isize {
        for j in 0..d {
            let mut acc = S::zero();
            for n in 1..=2isize {
                acc = acc + S::lit(n as f64) * (at(i + n, j) - at(i - n, j));
            }
            out[i as usize * d + j] = acc / denom;
        }
    }
    out
}

/// MFCC features (13 cepstra plus Δ and ΔΔ by default) at a 10 ms hop.
pub fn mfcc<S: Real + FftNum>(w: &Waveform<S>, cfg: &MfccConfig) -> Result<FeatureMatrix<S>> {
    let mel = log_mel_spectrum(w, cfg)?;
    let t = mel.rows();
    let c = cfg.n_ceps;
    let ceps = dct_rows(&mel, c);
    let frames = if cfg.deltas {
        let d1 = deltas(&ceps, t, c);
        let d2 = deltas(&d1, t, c);
        let mut all = Vec::with_capacity(t * 3 * c);
        for i in 0..t {
            all.extend_from_slice(&ceps[i * c..(i + 1) * c]);
            all.extend_from_slice(&d1[i * c..(i + 1) * c]);
            all.extend_from_slice(&d2[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![t, 3 * c], all)?
    } else {
        Tensor::new(vec![t, c], ceps)?
    };
    FeatureMatrix::new(frames, cfg.hop_ms, String::new())
}
