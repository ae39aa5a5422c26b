//! k-means codebooks and the discrete code streams they produce.

use std::path::Path;

use rand::Rng;

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const KMNS_MAGIC: &[u8; 4] = b"KMNS";

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    /// `K × D`.
    pub centroids: Tensor<S>,
    /// `"mfcc"` or `"layer:<n>"`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
    pub vocab_size: usize,
    pub id: String,
}

#[derive(Clone, Debug)]
pub struct KmeansFit<S> {
    pub codebook: Codebook<S>,
    /// Mean squared distance after each assignment pass.
    pub distortion: Vec<f64>,
    pub iterations: usize,
}

pub const REL_TOL: f64 = 1e-6;

fn sq_dist<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
fn nearest<S: Real>(centroids: &Tensor<S>, x: &[S]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for k in 0..centroids.rows() {
        let d = sq_dist(centroids.row(k), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl<S: Real> Codebook<S> {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn nearest(&self, x: &[S]) -> usize {
        nearest(&self.centroids, x).0
    }

    /// Mean squared distance from each row of `points` to its nearest centroid.
    pub fn distortion(&self, points: &Tensor<S>) -> f64 {
        if points.rows() == 0 {
            return 0.0;
        }
        let total: f64 = (0..points.rows()).map(|i| nearest(&self.centroids, points.row(i)).1.as_f64()).sum();
        total / points.rows() as f64
    }
}

/// Independent k-means++ initializations tried by [`fit_kmeans`].
pub const DEFAULT_N_INIT: usize = 10;

/// k-means++ seeding followed by Lloyd iterations over the rows of `points`, keeping the
/// best of [`DEFAULT_N_INIT`] initializations.
pub fn fit_kmeans<S: Real>(points: &Tensor<S>, k: usize, max_iters: usize, seed: u64) -> Result<KmeansFit<S>> {
    fit_kmeans_with(points, k, max_iters, seed, DEFAULT_N_INIT)
}

pub fn fit_kmeans_with<S: Real>(
    points: &Tensor<S>,
    k: usize,
    max_iters: usize,
    seed: u64,
    n_init: usize,
) -> Result<KmeansFit<S>> {
    if k == 0 {
        return Err(Error::invalid("fit_kmeans", "K must be at least 1"));
    }
    if points.rows() < k {
        return Err(Error::invalid("fit_kmeans", format!("{} points is fewer than K={k}", points.rows())));
    }
    let mut best: Option<KmeansFit<S>> = None;
    for run in 0..n_init.max(1) {
        let fit = lloyd(points, k, max_iters, &mut rng::seeded(rng::derive(seed, run as u64)))?;
        if best.as_ref().is_none_or(|b| fit.final_distortion() < b.final_distortion()) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

impl<S> KmeansFit<S> {
    pub fn final_distortion(&self) -> f64 {
        self.distortion.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn lloyd<S: Real, R: Rng>(points: &Tensor<S>, k: usize, max_iters: usize, rng: &mut R) -> Result<KmeansFit<S>> {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = kmeans_pp(points, k, rng)?;
    let mut assign = vec![0usize; n];
    let mut dist = vec![S::zero(); n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        for i in 0..n {
            let (a, dd) = nearest(&centroids, points.row(i));
            assign[i] = a;
            dist[i] = dd;
        }
        let cur = dist.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let converged = match history.last() {
            Some(&prev) => prev - cur <= REL_TOL * prev,
            None => false,
        };
        history.push(cur);
        if converged || cur == 0.0 || iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![S::zero(); k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(points.row(i)) {
                *s = *s + x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = S::one() / S::from_usize_lossy(counts[c]);
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
        // Empty clusters take over the point currently farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n).max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(b.cmp(&a))).unwrap();
                centroids.row_mut(c).copy_from_slice(points.row(far));
                dist[far] = S::zero();
                log::debug!("k-means: repaired empty cluster {c} with point {far}");
            }
        }
    }
    Ok(KmeansFit {
        codebook: Codebook {
            centroids,
            source: "mfcc".into(),
        },
        distortion: history,
        iterations,
    })
}

fn kmeans_pp<S: Real, R: Rng>(points: &Tensor<S>, k: usize, rng: &mut R) -> Result<Tensor<S>> {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = Tensor::zeros(&[k, d]);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first)).as_f64()).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("fit_kmeans", format!("fewer than K={k} distinct points")));
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        while d2[pick] <= 0.0 {
            pick -= 1;
        }
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), points.row(pick)).as_f64());
        }
    }
    Ok(centroids)
}

/// Stacks the frames of several feature matrices into one `N × D` tensor.
pub fn stack_frames<S: Real>(feats: &[FeatureMatrix<S>]) -> Result<Tensor<S>> {
    let d = feats.first().map_or(0, FeatureMatrix::dim);
    let mut data = Vec::new();
    for f in feats {
        if f.dim() != d {
            return Err(Error::shape("stack_frames", &[d], &[f.dim()]));
        }
        data.extend_from_slice(f.frames.data());
    }
    let n = data.len() / d.max(1);
    Tensor::new(vec![n, d], data)
}

pub fn assign<S: Real>(cb: &Codebook<S>, f: &FeatureMatrix<S>) -> Result<CodeSequence> {
    if f.dim() != cb.dim() {
        return Err(Error::shape("assign", &[cb.k(), cb.dim()], f.frames.shape()));
    }
    Ok(CodeSequence {
        codes: (0..f.num_frames()).map(|t| cb.nearest(f.row(t))).collect(),
        vocab_size: cb.k(),
        id: f.id.clone(),
    })
}

pub fn write_codebook<S: Real>(path: &Path, cb: &Codebook<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * cb.centroids.numel());
    buf.extend_from_slice(KMNS_MAGIC);
    buf.extend_from_slice(&(cb.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    for &v in cb.centroids.data() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    crate::util::write_atomic(path, &buf)
}

pub fn read_codebook<S: Real>(path: &Path, source: &str) -> Result<Codebook<S>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |field, detail: String| Error::Format {
        path: path.display().to_string(),
        field,
        detail,
    };
    if buf.len() < 12 || &buf[..4] != KMNS_MAGIC {
        return Err(bad("magic", "expected KMNS".into()));
    }
    let k = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if k == 0 {
        return Err(bad("K", "codebook has no centroids".into()));
    }
    if buf.len() != 12 + 8 * k * d {
        return Err(bad("length", format!("{} bytes for {k}×{d} centroids", buf.len())));
    }
    let data = buf[12..]
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Codebook {
        centroids: Tensor::new(vec![k, d], data)?,
        source: source.into(),
    })
}

/// One line per utterance: `utt_id<TAB>space-separated codes`.
pub fn write_codes(path: &Path, seqs: &[CodeSequence]) -> Result<()> {
    let mut s = String::new();
    for q in seqs {
        let codes: Vec<String> = q.codes.iter().map(usize::to_string).collect();
        s.push_str(&q.id);
        s.push('\t');
        s.push_str(&codes.join(" "));
        s.push('\n');
    }
    crate::util::write_atomic(path, s.as_bytes())
}

/// Reads a codes file; every code must be below `vocab_size`.
pub fn read_codes(path: &Path, vocab_size: usize) -> Result<Vec<CodeSequence>> {
    let text = crate::util::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected utt_id<TAB>codes".into()))?;
        let codes = rest
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(c) if c < vocab_size => Ok(c),
                _ => Err(err(format!("bad code {t:?} for vocabulary of {vocab_size}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(CodeSequence {
            codes,
            vocab_size,
            id: id.to_string(),
        });
    }
    Ok(out)
}
