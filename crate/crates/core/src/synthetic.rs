//! Toy speech with exact frame alignments.
//!
//! Each phone is a fixed tone plus band-limited noise; silence is near-zero noise. Phone
//! sequences come from a fixed bigram model, durations are uniform in whole 20 ms frames.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::rng;
use crate::text::PhonemeVocab;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Phones excluding silence; silence gets index `n_phones`.
    pub n_phones: usize,
    pub sample_rate: u32,
    pub frame_ms: u32,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    /// White-noise standard deviation relative to the template amplitude.
    pub noise_level: f64,
    /// Seeds the templates and the bigram model.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_phones: 8,
            sample_rate: 16000,
            frame_ms: 20,
            min_frames: 3,
            max_frames: 10,
            min_phones: 6,
            max_phones: 14,
            noise_level: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub tone_hz: f64,
    pub band_hz: (f64, f64),
    pub tone_amp: f64,
    pub band_amp: f64,
}

const TONE_AMP: f64 = 0.3;
const BAND_AMP: f64 = 0.15;
const SIL_AMP: f64 = 1e-4;
const BAND_PARTIALS: usize = 12;

/// Templates and bigram model realized from a [`SynthSpec`].
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub spec: SynthSpec,
    pub templates: Vec<Template>,
    /// `P × P` phone transition probabilities; no self-transitions.
    pub bigram: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedUtterance {
    pub id: String,
    pub waveform: Waveform<f64>,
    /// One label per frame.
    pub labels: Vec<usize>,
    /// Labels with repeats collapsed.
    pub transcript: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub speech: Vec<AlignedUtterance>,
    /// `(utt_id, phone sequence)` from utterances that contribute no audio.
    pub text: Vec<(String, Vec<usize>)>,
}

pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

impl Synthesizer {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        let p = spec.n_phones;
        if p < 2 {
            return Err(Error::invalid("synthesizer", "need at least two phones"));
        }
        if spec.min_frames == 0 || spec.min_frames > spec.max_frames || spec.min_phones == 0 || spec.min_phones > spec.max_phones {
            return Err(Error::invalid("synthesizer", "empty duration or length range"));
        }
        let nyq = spec.sample_rate as f64 / 2.0;
        let templates = (0..p)
            .map(|i| {
                // Tones on a geometric ladder below ~2.5 kHz, noise bands interleaved above it.
                let tone_hz = 250.0 * (10.0f64).powf(i as f64 / p as f64);
                let slot = (i * 3) % p;
                let lo = 2800.0 + slot as f64 * (nyq * 0.85 - 2800.0) / p as f64;
                Template {
                    tone_hz,
                    band_hz: (lo, lo + 450.0),
                    tone_amp: TONE_AMP,
                    band_amp: BAND_AMP,
                }
            })
            .collect();

        let mut r = rng::seeded(rng::derive(spec.seed, 0xB16));
        let normal = Normal::<f64>::new(0.0, 1.5).unwrap();
        let bigram: Vec<Vec<f64>> = (0..p)
            .map(|i| {
                let w: Vec<f64> = (0..p)
                    .map(|j| if i == j { 0.0 } else { normal.sample(&mut r).exp() })
                    .collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect();
        let mut stationary = vec![1.0 / p as f64; p];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..p).map(|j| (0..p).map(|i| stationary[i] * bigram[i][j]).sum()).collect();
            let delta: f64 = next.iter().zip(&stationary).map(|(a, b)| (a - b).abs()).sum();
            stationary = next;
            if delta < 1e-15 {
                break;
            }
        }
        Ok(Self {
            spec,
            templates,
            bigram,
            stationary,
        })
    }

    pub fn sil_index(&self) -> usize {
        self.spec.n_phones
    }

    pub fn vocab(&self) -> PhonemeVocab {
        PhonemeVocab::synthetic(self.spec.n_phones)
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.spec.sample_rate as usize * self.spec.frame_ms as usize) / 1000
    }

    fn draw(dist: &[f64], rng: &mut impl Rng) -> usize {
        let mut u = rng.random::<f64>();
        for (i, &p) in dist.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Phone sequence from the bigram model, bracketed by silence.
    pub fn sample_sequence(&self, rng: &mut impl Rng) -> Vec<usize> {
        let n = rng.random_range(self.spec.min_phones..=self.spec.max_phones);
        let mut seq = vec![self.sil_index()];
        let mut cur = Self::draw(&self.stationary, rng);
        seq.push(cur);
        for _ in 1..n {
            cur = Self::draw(&self.bigram[cur], rng);
            seq.push(cur);
        }
        seq.push(self.sil_index());
        seq
    }

    /// Renders per-frame labels to audio. A quarter-frame tail extends the last label so that
    /// 25 ms / 10 ms analysis decimated to 20 ms yields exactly one row per label.
    pub fn render(&self, labels: &[usize], rng: &mut impl Rng) -> Result<Waveform<f64>> {
        let spf = self.samples_per_frame();
        let sr = self.spec.sample_rate as f64;
        let tail = spf / 4;
        let total = labels.len() * spf + if labels.is_empty() { 0 } else { tail };
        let mut out = vec![0.0; total];
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut start = 0;
        while start < labels.len() {
            let l = labels[start];
            let end = start + labels[start..].iter().take_while(|&&x| x == l).count();
            let (a, b) = (start * spf, if end == labels.len() { total } else { end * spf });
            if l == self.sil_index() {
                for s in &mut out[a..b] {
                    *s = SIL_AMP * noise.sample(rng);
                }
            } else {
                let t = self.templates.get(l).ok_or_else(|| Error::invalid("render", format!("label {l} out of range")))?;
                let gain = rng.random_range(0.8..1.2);
                let phase = rng.random_range(0.0..2.0 * PI);
                let partials: Vec<(f64, f64)> = (0..BAND_PARTIALS)
                    .map(|_| (rng.random_range(t.band_hz.0..t.band_hz.1), rng.random_range(0.0..2.0 * PI)))
                    .collect();
                let band_norm = t.band_amp / (BAND_PARTIALS as f64 / 2.0).sqrt();
                let sigma = self.spec.noise_level * t.tone_amp;
                for (n, s) in out[a..b].iter_mut().enumerate() {
                    let time = n as f64 / sr;
                    let mut v = t.tone_amp * (2.0 * PI * t.tone_hz * time + phase).sin();
                    for &(f, ph) in &partials {
                        v += band_norm * (2.0 * PI * f * time + ph).sin();
                    }
                    *s = gain * v;
                    if sigma > 0.0 {
                        *s += sigma * noise.sample(rng);
                    }
                }
            }
            start = end;
        }
        for s in &mut out {
            *s = s.clamp(-1.0, 1.0);
        }
        Waveform::new(out, self.spec.sample_rate)
    }

    /// Frame labels for one utterance: a sampled sequence with sampled durations.
    pub fn sample_labels(&self, rng: &mut impl Rng) -> Vec<usize> {
        let seq = self.sample_sequence(rng);
        let mut labels = Vec::new();
        for &p in &seq {
            let d = rng.random_range(self.spec.min_frames..=self.spec.max_frames);
            labels.extend(std::iter::repeat_n(p, d));
        }
        labels
    }

    pub fn gen_utterance(&self, id: impl Into<String>, rng: &mut impl Rng) -> Result<AlignedUtterance> {
        let labels = self.sample_labels(rng);
        let waveform = self.render(&labels, rng)?;
        Ok(AlignedUtterance {
            id: id.into(),
            waveform,
            transcript: collapse(&labels),
            labels,
        })
    }

    /// `n_utts` utterances split into disjoint speech (first half, rounded up) and text halves.
    pub fn gen_corpus(&self, n_utts: usize, seed: u64) -> Result<SynthCorpus> {
        if n_utts < 2 {
            return Err(Error::invalid("gen_corpus", "need at least two utterances"));
        }
        let n_speech = n_utts.div_ceil(2);
        let mut speech = Vec::with_capacity(n_speech);
        let mut text = Vec::with_capacity(n_utts - n_speech);
        for i in 0..n_utts {
            let mut r = rng::seeded(rng::derive(seed, i as u64));
            let id = format!("utt{i:05}");
            if i < n_speech {
                speech.push(self.gen_utterance(id, &mut r)?);
            } else {
                text.push((id, collapse(&self.sample_labels(&mut r))));
            }
        }
        Ok(SynthCorpus { speech, text })
    }
}

/// Files written by [`write_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub text: PathBuf,
    pub alignments: PathBuf,
    pub vocab: PathBuf,
    pub wavs: Vec<PathBuf>,
}

/// Writes `wav/<id>.wav`, `speech.tsv` (id, wav path, phone transcript without silence), `text.txt`
/// (phone indices per line), `align.tsv` (id, frame labels) and `phones.txt`.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus, vocab: &PhonemeVocab) -> Result<CorpusFiles> {
    let wav_dir = dir.join("wav");
    let mut manifest = String::new();
    let mut align = String::new();
    let mut wavs = Vec::new();
    let ints = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for u in &corpus.speech {
        let path = wav_dir.join(format!("{}.wav", u.id));
        write_wav(&path, &u.waveform)?;
        let words: Vec<&str> = u
            .transcript
            .iter()
            .filter(|&&p| p != vocab.sil_index())
            .map(|&p| vocab.symbol(p).unwrap_or("?"))
            .collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", u.id, path.display(), words.join(" ")));
        align.push_str(&format!("{}\t{}\n", u.id, ints(&u.labels)));
        wavs.push(path);
    }
    let files = CorpusFiles {
        manifest: dir.join("speech.tsv"),
        text: dir.join("text.txt"),
        alignments: dir.join("align.tsv"),
        vocab: dir.join("phones.txt"),
        wavs,
    };
    crate::util::write_atomic(&files.manifest, manifest.as_bytes())?;
    crate::util::write_atomic(&files.alignments, align.as_bytes())?;
    let text: Vec<Vec<usize>> = corpus.text.iter().map(|(_, p)| p.clone()).collect();
    crate::text::write_phoneme_corpus(&files.text, &text)?;
    crate::util::write_atomic(&files.vocab, (vocab.symbols().join("\n") + "\n").as_bytes())?;
    Ok(files)
}

/// Reads an alignment file (`utt_id<TAB>labels`).
pub fn read_alignments(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let seqs = crate::kmeans::read_codes(path, usize::MAX)?;
    Ok(seqs.into_iter().map(|s| (s.id, s.codes)).collect())
}
