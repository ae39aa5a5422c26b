//! Adversarial phoneme tokenizer: a frame-level generator trained so that its output
//! sequences cannot be told apart from real phoneme sequences by a convolutional critic.

mod eval;
mod losses;
mod nets;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

pub use eval::{extract_pseudo_labels, mapped_accuracy, unit_mapping};
pub use losses::{
    loss_gan, loss_gp, loss_pd, loss_sp, loss_sp_batch, loss_ss, loss_ss_batch, GanLossFn, GpLossFn, LossRegistry,
    PdLossFn, Role, SpLossFn, SsLossFn,
};
pub use nets::{one_hot, Discriminator, Generator, GeneratorOutput, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};

use crate::audio::FeatureMatrix;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::kmeans::CodeSequence;
use crate::nn::{Adam, AdamConfig, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    /// Gradient-penalty weight.
    pub lambda_gp: f64,
    /// Smoothness weight.
    pub gamma_sp: f64,
    /// Phoneme-diversity weight.
    pub eta_pd: f64,
    /// Weight of the auxiliary k-means prediction.
    pub delta_ss: f64,
    pub vocab: usize,
    pub gen_kernel: usize,
    pub disc_channels: usize,
    pub disc_kernel: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Mean-pool runs of frames sharing an argmax before the critic sees them.
    pub join_segments: bool,
    /// Drop silence tokens from the text side (the speech side is silence-stripped).
    pub strip_text_silence: bool,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 1.5,
            gamma_sp: 0.5,
            eta_pd: 3.0,
            delta_ss: 0.5,
            vocab: 41,
            gen_kernel: 4,
            disc_channels: 96,
            disc_kernel: 6,
            lr_g: 5e-4,
            lr_d: 3e-4,
            steps: 2000,
            batch_size: 32,
            join_segments: true,
            strip_text_silence: true,
            seed: 0,
        }
    }
}

crate::kv_config!(GanConfig {
    "lambda_gp" => lambda_gp,
    "gamma_sp" => gamma_sp,
    "eta_pd" => eta_pd,
    "delta_ss" => delta_ss,
    "vocab" => vocab,
    "gen_kernel" => gen_kernel,
    "disc_channels" => disc_channels,
    "disc_kernel" => disc_kernel,
    "lr_g" => lr_g,
    "lr_d" => lr_d,
    "steps" => steps,
    "batch_size" => batch_size,
    "join_segments" => join_segments,
    "strip_text_silence" => strip_text_silence,
    "seed" => seed,
});

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_gp, self.gamma_sp, self.eta_pd, self.delta_ss];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.vocab < 2 || self.batch_size == 0 || self.gen_kernel == 0 || self.disc_kernel == 0 || self.disc_channels == 0 {
            return Err(Error::Config("vocab >= 2 and positive batch size, kernels and channels required".into()));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generator and discriminator sharing one parameter store (`gen.*`, `disc.*`).
#[derive(Clone, Debug)]
pub struct GanModel {
    pub store: ParamStore<f64>,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub cfg: GanConfig,
}

impl GanModel {
    pub fn new(cfg: &GanConfig, input_dim: usize, aux_vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(rng::derive(cfg.seed, 0));
        let generator = Generator::new(&mut store, input_dim, cfg.vocab, cfg.gen_kernel, aux_vocab, &mut r)?;
        let discriminator = Discriminator::new(&mut store, cfg.vocab, cfg.disc_channels, cfg.disc_kernel, &mut r)?;
        Ok(Self { store, generator, discriminator, cfg: cfg.clone() })
    }

    /// Parameters to `path`; config and input sizes to `<path>.cfg`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some((name, _)) = self.store.entries().iter().find(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        self.store.save(path)?;
        let text = format!(
            "input_dim={}\naux_vocab={}\n{}",
            self.generator.input_dim,
            self.generator.aux_vocab(&self.store),
            self.cfg.to_kv_string()
        );
        crate::util::write_atomic(&sidecar(path), text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let origin = side.display().to_string();
        let text = crate::util::read_to_string(&side)?;
        let mut cfg = GanConfig::default();
        let (mut input_dim, mut aux_vocab) = (None, 0);
        for (k, v, line) in crate::config::parse_lines(&text, &origin)? {
            let res = match k.as_str() {
                "input_dim" => crate::config::parse_value::<usize>(&k, &v).map(|x| input_dim = Some(x)),
                "aux_vocab" => crate::config::parse_value::<usize>(&k, &v).map(|x| aux_vocab = x),
                _ => cfg.kv_set(&k, &v),
            };
            res.map_err(|e| Error::Parse { path: origin.clone(), line, msg: e.to_string() })?;
        }
        let input_dim = input_dim.ok_or_else(|| Error::Parse { path: origin, line: 0, msg: "missing input_dim".into() })?;
        let mut m = Self::new(&cfg, input_dim, aux_vocab)?;
        m.store.load(path)?;
        Ok(m)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    crate::pretrain::sidecar_path(path)
}

/// Runs of equal argmax as `(start, len)`.
pub fn argmax_segments(probs: &Tensor<f64>) -> Vec<(usize, usize)> {
    let mut segs: Vec<(usize, usize)> = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..probs.rows() {
        let k = argmax(probs.row(t));
        if k == prev {
            segs.last_mut().unwrap().1 += 1;
        } else {
            segs.push((t, 1));
            prev = k;
        }
    }
    segs
}

/// Lowest index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut b = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[b] {
            b = k;
        }
    }
    b
}

/// Mean-pools each run of frames sharing an argmax, so fake sequences are at token rate.
/// Segment boundaries are not differentiated; the pooled values are.
pub fn segment_pool(g: &mut Graph<f64>, probs: Var) -> Result<Var> {
    let t = g.shape(probs)[0];
    let segs = argmax_segments(g.value(probs));
    let mut p = vec![0.0; segs.len() * t];
    for (s, &(start, len)) in segs.iter().enumerate() {
        for r in start..start + len {
            p[s * t + r] = 1.0 / len as f64;
        }
    }
    let pm = g.constant(Tensor::new(vec![segs.len(), t], p)?);
    g.matmul(pm, probs)
}

/// Unpaired training data: silence-stripped speech features with their k-means codes, and
/// phoneme index sequences from a disjoint text corpus.
#[derive(Clone, Copy, Debug)]
pub struct GanCorpus<'a> {
    pub speech: &'a [FeatureMatrix<f64>],
    /// Frame-aligned k-means codes for `speech`; may be empty when `delta_ss` is 0.
    pub codes: &'a [CodeSequence],
    pub text: &'a [Vec<usize>],
    pub silence: Option<usize>,
}

/// Per-step record; terms with zero weight are neither computed nor logged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GanLogEntry {
    pub step: usize,
    pub d_loss_gan: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_loss_gp: Option<f64>,
    pub d_total: f64,
    pub g_loss_gan: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_loss_sp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_loss_pd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_loss_ss: Option<f64>,
    pub g_total: f64,
}

/// Text preparation for the critic: optional silence removal, then repeats collapsed, since
/// pooled generator output never repeats a token either. Empty sequences are dropped.
pub fn prepare_text(text: &[Vec<usize>], silence: Option<usize>, collapse: bool) -> Vec<Vec<usize>> {
    text.iter()
        .map(|s| {
            let mut out: Vec<usize> = Vec::with_capacity(s.len());
            for &k in s {
                if Some(k) == silence {
                    continue;
                }
                if collapse && out.last() == Some(&k) {
                    continue;
                }
                out.push(k);
            }
            out
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Random crop of the longer tensor to the row count of the shorter.
pub fn crop_to_common(a: &Tensor<f64>, b: &Tensor<f64>, r: &mut rng::Rng) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = a.rows().min(b.rows());
    let crop = |t: &Tensor<f64>, r: &mut rng::Rng| -> Result<Tensor<f64>> {
        if t.rows() == n {
            return Ok(t.clone());
        }
        let start = r.random_range(0..=t.rows() - n);
        let c = t.cols();
        Tensor::new(vec![n, c], t.data()[start * c..(start + n) * c].to_vec())
    };
    Ok((crop(a, r)?, crop(b, r)?))
}

struct Sampler {
    n: usize,
    order: Vec<usize>,
}

impl Sampler {
    fn next(&mut self, r: &mut rng::Rng) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.n).collect();
            self.order.shuffle(r);
        }
        self.order.pop().unwrap()
    }
}

fn filtered(grads: Vec<(ParamId, Tensor<f64>)>, keep: &HashSet<ParamId>) -> Vec<(ParamId, Tensor<f64>)> {
    grads.into_iter().filter(|(id, _)| keep.contains(id)).collect()
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("GAN {what} at step {step}")))
    }
}

/// Graph nodes of the critic objective `L_gan + λ·L_gp`.
#[derive(Clone, Copy, Debug)]
pub struct CriticTerms {
    pub total: Var,
    pub gan: Var,
    pub gp: Option<Var>,
}

/// Critic objective on real one-hot and (detached) fake sequences. Pairs for the penalty are
/// cropped to a common length and interpolated with one uniform `α` each, drawn from `r`.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    disc: &Discriminator,
    registry: &LossRegistry,
    real: &[Tensor<f64>],
    fake: &[Tensor<f64>],
    lambda_gp: f64,
    r: &mut rng::Rng,
) -> Result<CriticTerms> {
    let mut real_scores = Vec::with_capacity(real.len());
    for t in real {
        let x = g.constant(t.clone());
        real_scores.push(disc.score(g, store, x)?);
    }
    let mut fake_scores = Vec::with_capacity(fake.len());
    for t in fake {
        let x = g.constant(t.clone());
        fake_scores.push(disc.score(g, store, x)?);
    }
    let gan = (registry.gan)(g, &real_scores, &fake_scores, Role::Discriminator)?;
    if lambda_gp <= 0.0 {
        return Ok(CriticTerms { total: gan, gan, gp: None });
    }
    let mut pairs = Vec::with_capacity(real.len().min(fake.len()));
    for (a, b) in real.iter().zip(fake) {
        pairs.push(crop_to_common(a, b, r)?);
    }
    let alphas: Vec<f64> = pairs.iter().map(|_| r.random::<f64>()).collect();
    let gp = (registry.gp)(g, &mut |g: &mut Graph<f64>, x: Var| disc.score(g, store, x), &pairs, &alphas)?;
    let w = g.scale(gp, lambda_gp);
    let total = g.add(gan, w)?;
    Ok(CriticTerms { total, gan, gp: Some(gp) })
}

/// Graph nodes of the generator objective `L_gan + γ·L_sp + η·L_pd + δ·L_ss`; zero-weight
/// terms are not built.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub total: Var,
    pub gan: Var,
    pub sp: Option<Var>,
    pub pd: Option<Var>,
    pub ss: Option<Var>,
    pub output: GeneratorOutput,
}

/// Generator objective for a speech batch; `codes` are required when `δ > 0`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    gen: &Generator,
    disc: &Discriminator,
    registry: &LossRegistry,
    cfg: &GanConfig,
    feats: &[&FeatureMatrix<f64>],
    codes: Option<&[&[usize]]>,
) -> Result<GeneratorTerms> {
    let output = gen.forward(g, store, feats, true)?;
    let mut fake_scores = Vec::with_capacity(output.probs.len());
    for &p in &output.probs {
        let v = if cfg.join_segments { segment_pool(g, p)? } else { p };
        fake_scores.push(disc.score(g, store, v)?);
    }
    let gan = (registry.gan)(g, &[], &fake_scores, Role::Generator)?;
    let mut total = gan;
    let mut add = |g: &mut Graph<f64>, v: Var, w: f64| -> Result<Option<Var>> {
        let s = g.scale(v, w);
        total = g.add(total, s)?;
        Ok(Some(v))
    };
    let sp = if cfg.gamma_sp > 0.0 {
        let v = (registry.sp)(g, &output.probs)?;
        add(g, v, cfg.gamma_sp)?
    } else {
        None
    };
    let pd = if cfg.eta_pd > 0.0 {
        let v = (registry.pd)(g, &output.probs)?;
        add(g, v, cfg.eta_pd)?
    } else {
        None
    };
    let ss = if cfg.delta_ss > 0.0 {
        let codes = codes.ok_or_else(|| Error::invalid("generator_loss", "auxiliary loss needs k-means codes"))?;
        let v = (registry.ss)(g, &output.aux_logits, codes)?;
        add(g, v, cfg.delta_ss)?
    } else {
        None
    };
    Ok(GeneratorTerms { total, gan, sp, pd, ss, output })
}

/// Detached generator output as the critic sees it.
pub fn fake_sequences(g: &mut Graph<f64>, store: &ParamStore<f64>, gen: &Generator, feats: &[&FeatureMatrix<f64>], join: bool) -> Result<Vec<Tensor<f64>>> {
    let out = gen.forward(g, store, feats, true)?;
    out.probs
        .iter()
        .map(|&p| {
            let v = if join { segment_pool(g, p)? } else { p };
            Ok(g.value(v).clone())
        })
        .collect()
}

/// Alternates one critic update (`L_gan + λ·L_gp`) and one generator update
/// (`L_gan + γ·L_sp + η·L_pd + δ·L_ss`) per step.
pub fn train_gan(
    cfg: &GanConfig,
    corpus: GanCorpus<'_>,
    registry: &LossRegistry,
    mut on_log: impl FnMut(&GanLogEntry),
) -> Result<(GanModel, Vec<GanLogEntry>)> {
    cfg.validate()?;
    if corpus.speech.is_empty() {
        return Err(Error::invalid("train_gan", "no speech utterances"));
    }
    let silence = if cfg.strip_text_silence { corpus.silence } else { None };
    let text = prepare_text(corpus.text, silence, cfg.join_segments);
    if text.is_empty() {
        return Err(Error::invalid("train_gan", "no text: adversarial training needs real phoneme sequences"));
    }
    if let Some(bad) = text.iter().flatten().find(|&&k| k >= cfg.vocab) {
        return Err(Error::invalid("train_gan", format!("text token {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let input_dim = corpus.speech[0].dim();
    let use_ss = cfg.delta_ss > 0.0;
    let aux_vocab = if use_ss {
        if corpus.codes.len() != corpus.speech.len() {
            return Err(Error::invalid("train_gan", "one k-means code sequence per speech utterance required"));
        }
        for (f, c) in corpus.speech.iter().zip(corpus.codes) {
            if f.num_frames() != c.codes.len() {
                return Err(Error::Utterance {
                    utt: f.id.clone(),
                    msg: format!("{} frames but {} k-means codes", f.num_frames(), c.codes.len()),
                });
            }
        }
        corpus.codes.iter().map(|c| c.vocab_size).max().unwrap_or(0)
    } else {
        0
    };
    let speech: Vec<usize> = (0..corpus.speech.len()).filter(|&i| corpus.speech[i].num_frames() > 0).collect();
    if speech.is_empty() {
        return Err(Error::invalid("train_gan", "all speech utterances are empty"));
    }
    let real: Vec<Tensor<f64>> = text.iter().map(|s| one_hot(s, cfg.vocab)).collect::<Result<_>>()?;

    let mut model = GanModel::new(cfg, input_dim, aux_vocab)?;
    let gen_ids: HashSet<ParamId> = model.store.ids_with_prefix("gen.").collect();
    let disc_ids: HashSet<ParamId> = model.store.ids_with_prefix("disc.").collect();
    let adam_cfg = AdamConfig { beta1: 0.5, beta2: 0.98, ..AdamConfig::default() };
    let mut adam_g = Adam::new(adam_cfg);
    let mut adam_d = Adam::new(adam_cfg);
    let mut r = rng::seeded(rng::derive(cfg.seed, 1));
    let mut speech_sampler = Sampler { n: speech.len(), order: Vec::new() };
    let mut text_sampler = Sampler { n: real.len(), order: Vec::new() };
    let gen = model.generator.clone();
    let disc = model.discriminator.clone();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let sb: Vec<usize> = (0..cfg.batch_size).map(|_| speech[speech_sampler.next(&mut r)]).collect();
        let real_batch: Vec<Tensor<f64>> = (0..cfg.batch_size).map(|_| real[text_sampler.next(&mut r)].clone()).collect();
        let feats: Vec<&FeatureMatrix<f64>> = sb.iter().map(|&i| &corpus.speech[i]).collect();

        let mut g = Graph::new(rng::derive(cfg.seed, 2 * step as u64));
        let fakes = fake_sequences(&mut g, &model.store, &gen, &feats, cfg.join_segments)?;
        let c = critic_loss(&mut g, &model.store, &disc, registry, &real_batch, &fakes, cfg.lambda_gp, &mut r)?;
        let d_loss_gan = finite(step, "critic loss", g.value(c.gan).item())?;
        let d_loss_gp = c.gp.map(|v| finite(step, "gradient penalty", g.value(v).item())).transpose()?;
        let d_total = finite(step, "critic objective", g.value(c.total).item())?;
        let grads = g.backward(c.total)?;
        adam_d.step(&mut model.store, &filtered(g.param_grads(&grads), &disc_ids), cfg.lr_d);
        drop(g);

        let mut g = Graph::new(rng::derive(cfg.seed, 2 * step as u64 + 1));
        let codes: Vec<&[usize]> = if use_ss { sb.iter().map(|&i| corpus.codes[i].codes.as_slice()).collect() } else { Vec::new() };
        let gt = generator_loss(&mut g, &model.store, &gen, &disc, registry, cfg, &feats, use_ss.then_some(codes.as_slice()))?;
        let val = |g: &Graph<f64>, v: Option<Var>, what: &str| v.map(|v| finite(step, what, g.value(v).item())).transpose();
        let entry = GanLogEntry {
            step,
            d_loss_gan,
            d_loss_gp,
            d_total,
            g_loss_gan: finite(step, "generator loss", g.value(gt.gan).item())?,
            g_loss_sp: val(&g, gt.sp, "smoothness loss")?,
            g_loss_pd: val(&g, gt.pd, "diversity loss")?,
            g_loss_ss: val(&g, gt.ss, "auxiliary loss")?,
            g_total: finite(step, "generator objective", g.value(gt.total).item())?,
        };
        let grads = g.backward(gt.total)?;
        adam_g.step(&mut model.store, &filtered(g.param_grads(&grads), &gen_ids), cfg.lr_g);
        gen.update_running_stats(&g, &gt.output, &mut model.store);

        on_log(&entry);
        log.push(entry);
    }
    Ok((model, log))
}
