use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{ctc_beam_decode, ctc_greedy_decode, ctc_loss, CtcVocab, BLANK};
use crate::config::KvConfig;
use crate::encoder::{sample_mask, Encoder, EncoderConfig, EncoderData, MaskSpec};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, LayerNormLayer, Linear, LrSchedule, ParamStore};
use crate::pretrain::PretrainModel;
use crate::rng;
use crate::tensor::{read_entries, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub freeze_conv: bool,
    /// Span masking as augmentation; start probability 0 disables it.
    pub mask: MaskSpec,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            hold_frac: 0.4,
            steps: 500,
            batch_size: 4,
            freeze_conv: true,
            mask: MaskSpec {
                start_prob: 0.0,
                span: 10,
            },
            weight_decay: 0.0,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

crate::kv_config!(FinetuneConfig {
    "peak_lr" => peak_lr,
    "warmup_frac" => warmup_frac,
    "hold_frac" => hold_frac,
    "steps" => steps,
    "batch_size" => batch_size,
    "freeze_conv" => freeze_conv,
    "mask.start_prob" => mask.start_prob,
    "mask.span" => mask.span,
    "weight_decay" => weight_decay,
    "clip_norm" => clip_norm,
    "seed" => seed,
});

crate::kv_config!(EncoderConfig {
    "frontend" => frontend,
    "layers" => transformer.layers,
    "dim" => transformer.dim,
    "ffn_dim" => transformer.ffn_dim,
    "heads" => transformer.heads,
    "relpos_buckets" => transformer.buckets,
    "relpos_max_distance" => transformer.max_distance,
    "dropout" => transformer.dropout,
});

impl FinetuneConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::TriStage {
            peak: self.peak_lr,
            warmup_frac: self.warmup_frac,
            hold_frac: self.hold_frac,
        }
    }
}

/// Encoder with a layer norm and linear output layer over the CTC vocabulary.
#[derive(Clone, Debug)]
pub struct CtcModel {
    pub store: ParamStore<f64>,
    pub encoder: Encoder,
    pub vocab: CtcVocab,
    pub head_norm: LayerNormLayer,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub id: String,
    pub data: EncoderData,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneLogEntry {
    pub step: usize,
    pub lr: f64,
    /// Mean CTC negative log-likelihood per utterance in the batch.
    pub loss: f64,
}

impl CtcModel {
    /// Randomly initialized encoder and head.
    pub fn new(cfg: EncoderConfig, vocab: CtcVocab, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(rng::derive(seed, 0));
        let encoder = Encoder::new(&mut store, cfg, &mut r)?;
        let mut hr = rng::seeded(rng::derive(seed, 2));
        let head_norm = LayerNormLayer::new(&mut store, "ctc.ln", encoder.dim());
        let head = Linear::new(&mut store, "ctc.out", encoder.dim(), vocab.len(), true, &mut hr);
        Ok(Self {
            store,
            encoder,
            vocab,
            head_norm,
            head,
        })
    }

    /// Copies every encoder parameter of a pre-trained model; the head is fresh.
    pub fn from_pretrained(pre: &PretrainModel, vocab: CtcVocab, seed: u64) -> Result<Self> {
        let mut m = Self::new(pre.encoder.cfg.clone(), vocab, seed)?;
        m.store.copy_prefix(&pre.store, "enc.")?;
        Ok(m)
    }

    /// `T × V` log-probabilities.
    pub fn log_probs(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, data: &EncoderData, mask: Option<&[bool]>, train: bool) -> Result<Var> {
        let out = self.encoder.forward(g, store, data.as_input(), mask, train)?;
        let top = *out.hidden.last().unwrap();
        let n = self.head_norm.forward(g, store, top)?;
        let logits = self.head.forward(g, store, n)?;
        Ok(g.log_softmax(logits))
    }

    /// CTC negative log-likelihood node for one utterance.
    pub fn ctc_node(&self, g: &mut Graph<f64>, lp: Var, target: &[usize]) -> Result<Var> {
        let (value, grad) = ctc_loss(g.value(lp), target, BLANK)?;
        g.precomputed(lp, value, grad.into_data())
    }

    pub fn eval_log_probs(&self, data: &EncoderData) -> Result<Tensor<f64>> {
        let mut g = Graph::new(0);
        let lp = self.log_probs(&mut g, &self.store, data, None, false)?;
        Ok(g.value(lp).clone())
    }

    /// Greedy decoding for `beam <= 1`, prefix beam search otherwise.
    pub fn transcribe(&self, data: &EncoderData, beam: usize) -> Result<Vec<usize>> {
        let lp = self.eval_log_probs(data)?;
        Ok(if beam <= 1 { ctc_greedy_decode(&lp, BLANK) } else { ctc_beam_decode(&lp, BLANK, beam).0 })
    }

    /// Parameters to `path`; vocabulary and encoder config to `<path>.cfg`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        let text = format!("vocab={}\n{}", self.vocab, self.encoder.cfg.to_kv_string());
        crate::util::write_atomic(&sidecar(path), text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let origin = side.display().to_string();
        let text = crate::util::read_to_string(&side)?;
        let mut cfg = EncoderConfig::default();
        let mut vocab = None;
        for (k, v, line) in crate::config::parse_lines(&text, &origin)? {
            let res = if k == "vocab" {
                crate::config::parse_value::<CtcVocab>(&k, &v).map(|x| vocab = Some(x))
            } else {
                cfg.kv_set(&k, &v)
            };
            res.map_err(|e| Error::Parse {
                path: origin.clone(),
                line,
                msg: e.to_string(),
            })?;
        }
        let vocab = vocab.ok_or_else(|| Error::Parse {
            path: origin.clone(),
            line: 0,
            msg: "missing vocab".into(),
        })?;
        let mut m = Self::new(cfg, vocab, 0)?;
        let leftover = m.store.assign_from(read_entries(path)?)?;
        if let Some((name, _)) = leftover.first() {
            return Err(Error::Format {
                path: path.display().to_string(),
                field: "parameters",
                detail: format!("unexpected entry {name:?}"),
            });
        }
        Ok(m)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    crate::pretrain::sidecar_path(path)
}

/// Fine-tunes with CTC under the tri-stage schedule. Targets must fit the model vocabulary.
pub fn finetune(
    mut model: CtcModel,
    corpus: &[LabeledUtterance],
    cfg: &FinetuneConfig,
    mut on_log: impl FnMut(&FinetuneLogEntry),
) -> Result<(CtcModel, Vec<FinetuneLogEntry>)> {
    if corpus.is_empty() {
        return Err(Error::invalid("finetune", "empty corpus"));
    }
    for u in corpus {
        if u.target.is_empty() {
            return Err(Error::Utterance {
                utt: u.id.clone(),
                msg: "empty transcript".into(),
            });
        }
        if let Some(&bad) = u.target.iter().find(|&&l| l == BLANK || l >= model.vocab.len()) {
            return Err(Error::Utterance {
                utt: u.id.clone(),
                msg: format!("label {bad} outside vocabulary of {}", model.vocab.len()),
            });
        }
    }
    model.encoder.set_conv_trainable(&mut model.store, !cfg.freeze_conv);
    let schedule = cfg.schedule();
    let mut adam = Adam::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        weight_decay: cfg.weight_decay,
        clip_norm: (cfg.clip_norm > 0.0).then_some(cfg.clip_norm),
        ..AdamConfig::default()
    });
    let mut r = rng::seeded(rng::derive(cfg.seed, 3));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut g = Graph::new(rng::derive(cfg.seed, 5000 + step as u64));
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut r);
            }
            let u = &corpus[order.pop().unwrap()];
            let t = model.encoder.frames_for(u.data.len())?;
            let mask = (cfg.mask.start_prob > 0.0).then(|| sample_mask(t, &cfg.mask, &mut r));
            let lp = model.log_probs(&mut g, &model.store, &u.data, mask.as_deref(), true)?;
            let node = model.ctc_node(&mut g, lp, &u.target).map_err(|e| Error::Utterance {
                utt: u.id.clone(),
                msg: e.to_string(),
            })?;
            terms.push(node);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let loss = g.scale(total, 1.0 / terms.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
        }
        let lr = schedule.at_step(step, cfg.steps);
        let grads = g.backward(loss)?;
        adam.step(&mut model.store, &g.param_grads(&grads), lr);
        let entry = FinetuneLogEntry { step, lr, loss: value };
        on_log(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// One line of a labeled manifest: `utt_id<TAB>wav_path<TAB>transcript`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    pub transcript: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = crate::util::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(wav)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: "expected utt_id<TAB>wav_path<TAB>transcript".into(),
            });
        };
        let wav = PathBuf::from(wav);
        out.push(ManifestEntry {
            id: id.to_string(),
            wav: if wav.is_relative() && !wav.exists() { base.join(wav) } else { wav },
            transcript: parts.next().unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.id, e.wav.display(), e.transcript));
    }
    crate::util::write_atomic(path, s.as_bytes())
}

/// Decode output: `utt_id<TAB>hypothesis` per line.
pub fn write_hypotheses(path: &Path, hyps: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (id, h) in hyps {
        s.push_str(&format!("{id}\t{h}\n"));
    }
    crate::util::write_atomic(path, s.as_bytes())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>> {
    let text = crate::util::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = crate::util::split_tab(l);
            (a.to_string(), b.to_string())
        })
        .collect())
}
