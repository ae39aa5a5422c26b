use std::ops::Range;

use super::Waveform;
use crate::real::Real;

/// Two-pass energy VAD settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Frames within this many dB of the loudest frame count as speech.
    pub threshold_db: f64,
    /// Non-speech gaps of at most this many frames are closed.
    pub max_gap_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            threshold_db: 40.0,
            max_gap_frames: 3,
        }
    }
}

/// Mean-square energy below which a frame is digital silence.
const ENERGY_FLOOR: f64 = 1e-10;

/// Speech segments as disjoint, sorted sample ranges.
///
/// Frame energies are compared against the utterance peak; runs of speech frames separated
/// by short gaps are merged, and runs touching either end of the signal extend to it.
pub fn energy_vad<S: Real>(w: &Waveform<S>, frame_ms: f64, threshold_db: f64) -> Vec<Range<usize>> {
    let cfg = VadConfig {
        frame_ms,
        hop_ms: VadConfig::default().hop_ms.min(frame_ms),
        threshold_db,
        ..VadConfig::default()
    };
    energy_vad_with(w, &cfg)
}

pub fn energy_vad_with<S: Real>(w: &Waveform<S>, cfg: &VadConfig) -> Vec<Range<usize>> {
    let n = w.samples.len();
    if n == 0 || cfg.frame_ms <= 0.0 {
        return Vec::new();
    }
    let sr = w.sample_rate as f64;
    let win = ((cfg.frame_ms * sr / 1000.0).round() as usize).max(1);
    let hop = ((cfg.hop_ms * sr / 1000.0).round() as usize).clamp(1, win);
    let frames = if n <= win { 1 } else { (n - win) / hop + 1 };
    let energy: Vec<f64> = (0..frames)
        .map(|f| {
            let s = &w.samples[f * hop..(f * hop + win).min(n)];
            s.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>() / s.len() as f64
        })
        .collect();
    let peak = energy.iter().copied().fold(0.0, f64::max);
    if peak <= ENERGY_FLOOR {
        return Vec::new();
    }
    let peak_db = 10.0 * peak.log10();
    let speech: Vec<bool> = energy
        .iter()
        .map(|&e| e > ENERGY_FLOOR && 10.0 * e.log10() >= peak_db - cfg.threshold_db)
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (f, &s) in speech.iter().enumerate() {
        if !s {
            continue;
        }
        match runs.last_mut() {
            Some((_, end)) if f - *end - 1 <= cfg.max_gap_frames => *end = f,
            _ => runs.push((f, f)),
        }
    }
    let mut segs: Vec<Range<usize>> = Vec::new();
    for (a, b) in runs {
        let start = if a == 0 { 0 } else { a * hop };
        let end = if b + 1 == frames { n } else { (b * hop + win).min(n) };
        match segs.last_mut() {
            Some(last) if start <= last.end => last.end = last.end.max(end),
            _ => segs.push(start..end),
        }
    }
    segs
}

/// Concatenates the speech segments found by the VAD.
pub fn strip_silence<S: Real>(w: &Waveform<S>, cfg: &VadConfig) -> Waveform<S> {
    let samples = energy_vad_with(w, cfg)
        .into_iter()
        .flat_map(|r| w.samples[r].iter().copied())
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}
