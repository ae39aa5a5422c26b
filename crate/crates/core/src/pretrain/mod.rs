//! Multi-layer masked-prediction pre-training: GAN pseudo-phonemes supervise an
//! intermediate layer `k`, k-means codes supervise the top layer `L`.

mod align;
mod head;

pub use align::{align_targets, DEFAULT_TOLERANCE};
pub use head::{masked_prediction_loss, PredictionHead, Stream, NORM_EPS};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::config::KvConfig;
use crate::encoder::{sample_mask, mask_indices, Encoder, EncoderConfig, EncoderData, MaskSpec};
use crate::error::{Error, Result};
use crate::kmeans::{fit_kmeans, Codebook, CodeSequence};
use crate::nn::{Adam, AdamConfig, LrSchedule, ParamStore};
use crate::rng;
use crate::tensor::{read_entries, Graph};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    /// Intermediate layer supervised by GAN codes.
    pub layer_k: usize,
    /// Top layer supervised by k-means codes.
    pub layer_l: usize,
    pub use_layer_k: bool,
    pub weight_k: f64,
    pub weight_l: f64,
    pub vocab_k: usize,
    pub vocab_l: usize,
    pub mask: MaskSpec,
    pub tau: f64,
    pub embed_dim: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Gradient-norm clipping threshold; 0 disables it.
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Random crop length in encoder frames; 0 uses whole utterances.
    pub crop_frames: usize,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            layer_k: 4,
            layer_l: 6,
            use_layer_k: true,
            weight_k: 1.0,
            weight_l: 1.0,
            vocab_k: 41,
            vocab_l: 100,
            mask: MaskSpec::default(),
            tau: 0.1,
            embed_dim: 256,
            peak_lr: 5e-4,
            warmup_frac: 0.08,
            weight_decay: 0.01,
            clip_norm: 10.0,
            steps: 1000,
            batch_size: 8,
            crop_frames: 0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

crate::kv_config!(PretrainConfig {
    "encoder.frontend" => encoder.frontend,
    "encoder.layers" => encoder.transformer.layers,
    "encoder.dim" => encoder.transformer.dim,
    "encoder.ffn_dim" => encoder.transformer.ffn_dim,
    "encoder.heads" => encoder.transformer.heads,
    "encoder.relpos_buckets" => encoder.transformer.buckets,
    "encoder.relpos_max_distance" => encoder.transformer.max_distance,
    "encoder.dropout" => encoder.transformer.dropout,
    "layer_k" => layer_k,
    "layer_l" => layer_l,
    "use_layer_k" => use_layer_k,
    "weight_k" => weight_k,
    "weight_l" => weight_l,
    "vocab_k" => vocab_k,
    "vocab_l" => vocab_l,
    "mask.start_prob" => mask.start_prob,
    "mask.span" => mask.span,
    "tau" => tau,
    "embed_dim" => embed_dim,
    "peak_lr" => peak_lr,
    "warmup_frac" => warmup_frac,
    "weight_decay" => weight_decay,
    "clip_norm" => clip_norm,
    "steps" => steps,
    "batch_size" => batch_size,
    "crop_frames" => crop_frames,
    "seed" => seed,
    "checkpoint_every" => checkpoint_every,
});

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let layers = self.encoder.transformer.layers;
        if self.layer_l == 0 || self.layer_l > layers {
            return Err(Error::Config(format!("layer_l={} outside 1..={layers}", self.layer_l)));
        }
        if self.use_layer_k && (self.layer_k == 0 || self.layer_k >= self.layer_l) {
            return Err(Error::Config(format!("need 1 ≤ layer_k < layer_l, got k={} L={}", self.layer_k, self.layer_l)));
        }
        if !(0.0..=1.0).contains(&self.mask.start_prob) || self.mask.span == 0 {
            return Err(Error::Config("mask.start_prob must be in [0,1] and mask.span ≥ 1".into()));
        }
        if self.weight_k < 0.0 || self.weight_l < 0.0 {
            return Err(Error::Config("stream weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder plus prediction heads, all parameters in one store.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub store: ParamStore<f64>,
    pub encoder: Encoder,
    pub head_k: Option<PredictionHead>,
    pub head_l: PredictionHead,
}

impl PretrainModel {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(rng::derive(cfg.seed, 0));
        let encoder = Encoder::new(&mut store, cfg.encoder.clone(), &mut r)?;
        let dim = cfg.encoder.transformer.dim;
        let head_k = if cfg.use_layer_k {
            Some(PredictionHead::new(&mut store, "head_k", dim, cfg.embed_dim, cfg.vocab_k, cfg.tau, &mut r)?)
        } else {
            None
        };
        let head_l = PredictionHead::new(&mut store, "head_l", dim, cfg.embed_dim, cfg.vocab_l, cfg.tau, &mut r)?;
        Ok(Self {
            store,
            encoder,
            head_k,
            head_l,
        })
    }

    /// Writes parameters to `path` and `step=` plus the config to `<path>.cfg`, both atomically.
    /// Refuses to overwrite with non-finite parameters.
    pub fn save(&self, path: &Path, cfg: &PretrainConfig, step: usize) -> Result<()> {
        if let Some(id) = self.store.ids().find(|&id| !self.store.get(id).all_finite()) {
            return Err(Error::NonFinite(format!("parameter {} at step {step}", self.store.name(id))));
        }
        self.store.save(path)?;
        let text = format!("step={step}\n{}", cfg.to_kv_string());
        crate::util::write_atomic(&sidecar_path(path), text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, PretrainConfig, usize)> {
        let (cfg, step) = read_sidecar(path)?;
        let mut model = Self::new(&cfg)?;
        let leftover = model.store.assign_from(read_entries(path)?)?;
        if let Some((name, _)) = leftover.first() {
            return Err(Error::Format {
                path: path.display().to_string(),
                field: "parameters",
                detail: format!("unexpected entry {name:?}"),
            });
        }
        Ok((model, cfg, step))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Reads `<path>.cfg`: the pre-training config and the step it was saved at.
pub fn read_sidecar(path: &Path) -> Result<(PretrainConfig, usize)> {
    let side = sidecar_path(path);
    let text = crate::util::read_to_string(&side)?;
    let origin = side.display().to_string();
    let mut cfg = PretrainConfig::default();
    let mut step = 0;
    for (k, v, line) in crate::config::parse_lines(&text, &origin)? {
        let res = if k == "step" {
            crate::config::parse_value(&k, &v).map(|s| step = s)
        } else {
            cfg.kv_set(&k, &v)
        };
        res.map_err(|e| Error::Parse {
            path: origin.clone(),
            line,
            msg: e.to_string(),
        })?;
    }
    Ok((cfg, step))
}

#[derive(Clone, Debug)]
pub struct PretrainUtterance {
    pub id: String,
    pub data: EncoderData,
    pub kmeans: CodeSequence,
    pub gan: Option<CodeSequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub lr: f64,
    /// Weighted stream losses per masked frame.
    pub loss_total: f64,
    pub loss_layer_k: f64,
    #[serde(rename = "loss_layer_L")]
    pub loss_layer_l: f64,
    pub mask_fraction: f64,
}

struct Prepared {
    data: EncoderData,
    frames: usize,
    kmeans: Vec<usize>,
    gan: Option<Vec<usize>>,
}

fn prepare(enc: &Encoder, cfg: &PretrainConfig, corpus: &[PretrainUtterance]) -> Result<Vec<Prepared>> {
    corpus
        .iter()
        .map(|u| {
            let t_enc = enc.frames_for(u.data.len()).map_err(|e| Error::Utterance {
                utt: u.id.clone(),
                msg: e.to_string(),
            })?;
            let km = align_targets(&u.kmeans, t_enc, DEFAULT_TOLERANCE)?;
            let gan = match (&u.gan, cfg.use_layer_k) {
                (Some(g), true) => Some(align_targets(g, t_enc, DEFAULT_TOLERANCE)?),
                (None, true) => {
                    return Err(Error::Utterance {
                        utt: u.id.clone(),
                        msg: "missing GAN targets for the layer-k stream".into(),
                    })
                }
                _ => None,
            };
            let frames = gan.as_ref().map_or(km.codes.len(), |g| g.codes.len().min(km.codes.len()));
            for (codes, vocab, name) in [(Some(&km), cfg.vocab_l, "k-means"), (gan.as_ref(), cfg.vocab_k, "GAN")] {
                if let Some(c) = codes.and_then(|c| c.codes.iter().find(|&&x| x >= vocab)) {
                    return Err(Error::Utterance {
                        utt: u.id.clone(),
                        msg: format!("{name} code {c} outside vocabulary of {vocab}"),
                    });
                }
            }
            let data = if frames < t_enc { enc.crop(&u.data, 0, frames)? } else { u.data.clone() };
            Ok(Prepared {
                data,
                frames,
                kmeans: km.codes[..frames].to_vec(),
                gan: gan.map(|g| g.codes[..frames].to_vec()),
            })
        })
        .collect()
}

/// Trains from a fresh model; see [`pretrain_from`].
pub fn pretrain(
    cfg: &PretrainConfig,
    corpus: &[PretrainUtterance],
    checkpoint: Option<&Path>,
    on_log: impl FnMut(&PretrainLogEntry),
) -> Result<(PretrainModel, Vec<PretrainLogEntry>)> {
    let model = PretrainModel::new(cfg)?;
    pretrain_from(model, cfg, corpus, checkpoint, on_log)
}

/// Runs `cfg.steps` updates. Each step draws `batch_size` utterances (epoch-wise shuffling),
/// optionally crops them, samples one mask per utterance shared by both streams, and
/// minimizes the weighted masked-prediction loss averaged over masked frames.
///
/// With a checkpoint path, parameters are written every `checkpoint_every` steps and at the
/// end. A non-finite loss aborts before the update, leaving the last checkpoint in place.
pub fn pretrain_from(
    mut model: PretrainModel,
    cfg: &PretrainConfig,
    corpus: &[PretrainUtterance],
    checkpoint: Option<&Path>,
    mut on_log: impl FnMut(&PretrainLogEntry),
) -> Result<(PretrainModel, Vec<PretrainLogEntry>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pretrain", "empty corpus"));
    }
    let data = prepare(&model.encoder, cfg, corpus)?;
    let schedule = LrSchedule::WarmupLinear {
        peak: cfg.peak_lr,
        warmup_frac: cfg.warmup_frac,
    };
    let mut adam = Adam::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        weight_decay: cfg.weight_decay,
        clip_norm: (cfg.clip_norm > 0.0).then_some(cfg.clip_norm),
        ..AdamConfig::default()
    });
    let mut r = rng::seeded(rng::derive(cfg.seed, 1));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    if let Some(path) = checkpoint {
        model.save(path, cfg, 0)?;
    }
    for step in 1..=cfg.steps {
        let mut g = Graph::new(rng::derive(cfg.seed, 1000 + step as u64));
        let mut sums = [0.0f64; 2];
        let mut terms = Vec::new();
        let (mut n_masked, mut n_frames) = (0usize, 0usize);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut r);
            }
            let u = &data[order.pop().unwrap()];
            let (input, start, t) = if cfg.crop_frames > 0 && u.frames > cfg.crop_frames {
                let s = r.random_range(0..=u.frames - cfg.crop_frames);
                (model.encoder.crop(&u.data, s, cfg.crop_frames)?, s, cfg.crop_frames)
            } else {
                (u.data.clone(), 0, u.frames)
            };
            let mask = sample_mask(t, &cfg.mask, &mut r);
            let masked = mask_indices(&mask);
            let out = model.encoder.forward(&mut g, &model.store, input.as_input(), Some(&mask), true)?;
            let km = &u.kmeans[start..start + t];
            let mut streams = Vec::with_capacity(2);
            if let (Some(head), Some(gan)) = (&model.head_k, &u.gan) {
                streams.push((0, cfg.weight_k, Stream { layer: cfg.layer_k, head, targets: &gan[start..start + t] }));
            }
            streams.push((1, cfg.weight_l, Stream { layer: cfg.layer_l, head: &model.head_l, targets: km }));
            let plain: Vec<Stream<'_>> = streams.iter().map(|(_, _, s)| *s).collect();
            let (_, parts) = masked_prediction_loss(&mut g, &model.store, &out.hidden, &plain, &masked)?;
            for ((slot, w, _), p) in streams.iter().zip(parts) {
                sums[*slot] += g.value(p).item();
                terms.push(g.scale(p, *w));
            }
            n_masked += masked.len();
            n_frames += t;
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let denom = n_masked.max(1) as f64;
        let objective = g.scale(total, 1.0 / denom);
        let value = g.value(objective).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pre-training loss at step {step}")));
        }
        let lr = schedule.at_step(step, cfg.steps);
        if n_masked > 0 {
            let grads = g.backward(objective)?;
            adam.step(&mut model.store, &g.param_grads(&grads), lr);
        }
        let entry = PretrainLogEntry {
            step,
            lr,
            loss_total: value,
            loss_layer_k: sums[0] / denom,
            loss_layer_l: sums[1] / denom,
            mask_fraction: n_masked as f64 / n_frames.max(1) as f64,
        };
        on_log(&entry);
        log.push(entry);
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                model.save(path, cfg, step)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        model.save(path, cfg, cfg.steps)?;
    }
    Ok((model, log))
}

/// Eval-mode hidden states of `layer` for every utterance.
pub fn layer_activations(enc: &Encoder, store: &ParamStore<f64>, corpus: &[EncoderData], layer: usize) -> Result<Vec<crate::audio::FeatureMatrix<f64>>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, d)| enc.layer_features(store, d.as_input(), layer, &format!("{i}")))
        .collect()
}

/// Fits k-means on eval-mode layer-`layer` activations (no masking) of a trained encoder.
pub fn recluster_from_layer(
    enc: &Encoder,
    store: &ParamStore<f64>,
    layer: usize,
    corpus: &[EncoderData],
    k: usize,
    seed: u64,
) -> Result<Codebook<f64>> {
    let feats = layer_activations(enc, store, corpus, layer)?;
    let points = crate::kmeans::stack_frames(&feats)?;
    let mut cb = fit_kmeans(&points, k, 100, seed)?.codebook;
    cb.source = format!("layer:{layer}");
    Ok(cb)
}

/// Unweighted masked-prediction loss of one utterance under a given mask, with parameters
/// read from `store` (which must share the layout of `model.store`).
#[allow(clippy::too_many_arguments)]
pub fn utterance_loss(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    model: &PretrainModel,
    cfg: &PretrainConfig,
    data: &EncoderData,
    kmeans: &[usize],
    gan: Option<&[usize]>,
    mask: &[bool],
) -> Result<crate::tensor::Var> {
    let out = model.encoder.forward(g, store, data.as_input(), Some(mask), false)?;
    let mut streams = Vec::new();
    if let (Some(head), Some(targets)) = (&model.head_k, gan) {
        streams.push(Stream { layer: cfg.layer_k, head, targets });
    }
    streams.push(Stream { layer: cfg.layer_l, head: &model.head_l, targets: kmeans });
    Ok(masked_prediction_loss(g, store, &out.hidden, &streams, &mask_indices(mask))?.0)
}
