//! Synthetic-corpus harness shared by the command line, the ablations and the acceptance suite.

use std::ops::Range;

use crate::audio::{energy_vad_with, frame_align_20ms, mfcc, FeatureMatrix, MfccConfig, VadConfig, Waveform};
use crate::config::KvConfig;
use crate::ctc::{corpus_error_rate, finetune, CtcModel, CtcVocab, FinetuneConfig, LabeledUtterance};
use crate::encoder::{EncoderConfig, EncoderData, Frontend, MaskSpec, TransformerConfig};
use crate::error::{Error, Result};
use crate::gan::{extract_pseudo_labels, mapped_accuracy, train_gan, GanConfig, GanCorpus, GanLogEntry, GanModel, LossRegistry};
use crate::kmeans::{assign, fit_kmeans, stack_frames, Codebook, CodeSequence};
use crate::pretrain::{pretrain_from, PretrainConfig, PretrainModel, PretrainUtterance};
use crate::synthetic::{SynthSpec, Synthesizer};

/// One synthetic speech utterance as seen by every stage.
#[derive(Clone, Debug)]
pub struct SpeechItem {
    pub id: String,
    pub waveform: Waveform<f64>,
    /// 20 ms MFCC over the whole utterance.
    pub full: FeatureMatrix<f64>,
    /// 20 ms MFCC over the VAD-retained audio.
    pub stripped: FeatureMatrix<f64>,
    pub labels_full: Vec<usize>,
    pub labels_stripped: Vec<usize>,
    pub transcript: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub synth: Synthesizer,
    pub speech: Vec<SpeechItem>,
    /// Phone sequences (with silence) of the disjoint text half.
    pub text: Vec<Vec<usize>>,
}

impl SyntheticSet {
    pub fn silence(&self) -> usize {
        self.synth.sil_index()
    }

    /// Phones plus silence.
    pub fn n_labels(&self) -> usize {
        self.synth.spec.n_phones + 1
    }
}

/// 20 ms MFCC of `w`.
pub fn features_20ms(w: &Waveform<f64>, cfg: &MfccConfig, id: &str) -> Result<FeatureMatrix<f64>> {
    Ok(frame_align_20ms(&mfcc(w, cfg)?)?.with_id(id))
}

/// Label of each 20 ms frame of the VAD-stripped signal: the frame's window centre is mapped
/// back through the kept segments to the original signal.
pub fn stripped_frame_labels(labels: &[usize], segments: &[Range<usize>], n_frames: usize, samples_per_frame: usize) -> Vec<usize> {
    let centre_offset = 200usize.min(samples_per_frame);
    (0..n_frames)
        .map(|i| {
            let mut p = i * samples_per_frame + centre_offset;
            let mut orig = segments.last().map_or(0, |s| s.end.saturating_sub(1));
            for s in segments {
                if p < s.len() {
                    orig = s.start + p;
                    break;
                }
                p -= s.len();
            }
            labels[(orig / samples_per_frame).min(labels.len() - 1)]
        })
        .collect()
}

/// Renders the speech half of a synthetic corpus and computes both feature views.
pub fn prepare_synthetic(spec: SynthSpec, n_utts: usize, seed: u64) -> Result<SyntheticSet> {
    let synth = Synthesizer::new(spec)?;
    let corpus = synth.gen_corpus(n_utts, seed)?;
    let mcfg = MfccConfig::default();
    let vad = VadConfig::default();
    let spf = synth.samples_per_frame();
    let mut speech = Vec::with_capacity(corpus.speech.len());
    for u in corpus.speech {
        let full = features_20ms(&u.waveform, &mcfg, &u.id)?;
        let segs = energy_vad_with(&u.waveform, &vad);
        let samples: Vec<f64> = segs.iter().flat_map(|r| u.waveform.samples[r.clone()].iter().copied()).collect();
        let kept = Waveform { samples, sample_rate: u.waveform.sample_rate };
        let stripped = features_20ms(&kept, &mcfg, &u.id)?;
        let labels_stripped = stripped_frame_labels(&u.labels, &segs, stripped.num_frames(), spf);
        let mut labels_full = u.labels.clone();
        labels_full.truncate(full.num_frames());
        if labels_full.len() != full.num_frames() {
            return Err(Error::Utterance { utt: u.id, msg: "fewer labels than frames".into() });
        }
        speech.push(SpeechItem {
            id: u.id,
            waveform: u.waveform,
            full,
            stripped,
            labels_full,
            labels_stripped,
            transcript: u.transcript,
        });
    }
    Ok(SyntheticSet { synth, speech, text: corpus.text.into_iter().map(|(_, s)| s).collect() })
}

/// Fits k-means on the given feature view and assigns every utterance.
pub fn kmeans_codes(feats: &[&FeatureMatrix<f64>], k: usize, seed: u64) -> Result<(Codebook<f64>, Vec<CodeSequence>)> {
    let owned: Vec<FeatureMatrix<f64>> = feats.iter().map(|f| (*f).clone()).collect();
    let points = stack_frames(&owned)?;
    let fit = fit_kmeans(&points, k, 100, seed)?;
    let codes = feats.iter().map(|f| assign(&fit.codebook, f)).collect::<Result<Vec<_>>>()?;
    Ok((fit.codebook, codes))
}

/// Result of training the adversarial tokenizer on a synthetic set.
#[derive(Clone, Debug)]
pub struct GanRun {
    pub model: GanModel,
    pub log: Vec<GanLogEntry>,
    /// Mapped frame accuracy on the silence-stripped speech it was trained on.
    pub accuracy: f64,
}

pub fn run_gan(set: &SyntheticSet, cfg: &GanConfig, kmeans_k: usize) -> Result<GanRun> {
    let stripped: Vec<&FeatureMatrix<f64>> = set.speech.iter().map(|s| &s.stripped).collect();
    let codes = if cfg.delta_ss > 0.0 { kmeans_codes(&stripped, kmeans_k, cfg.seed)?.1 } else { Vec::new() };
    let speech: Vec<FeatureMatrix<f64>> = stripped.iter().map(|f| (*f).clone()).collect();
    let corpus = GanCorpus { speech: &speech, codes: &codes, text: &set.text, silence: Some(set.silence()) };
    let (model, log) = train_gan(cfg, corpus, &LossRegistry::default(), |_| {})?;
    let labels = extract_pseudo_labels(&model.generator, &model.store, &speech)?;
    let pairs: Vec<(&[usize], &[usize])> =
        labels.iter().zip(&set.speech).map(|(l, s)| (l.codes.as_slice(), s.labels_stripped.as_slice())).collect();
    let accuracy = mapped_accuracy(&pairs, cfg.vocab, set.n_labels())?;
    Ok(GanRun { model, log, accuracy })
}

/// Settings of the synthetic end-to-end comparison and the ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Utterances generated in total; half become speech, half text.
    pub n_utts: usize,
    /// Text utterances per speech utterance fed to the GAN; 0 disables text.
    pub text_ratio: f64,
    /// k-means vocabulary of the GAN's auxiliary stream.
    pub gan_aux_k: usize,
    /// Speech utterances with transcripts used for fine-tuning.
    pub n_labeled: usize,
    /// Speech utterances held out for scoring (taken from the end of the speech half).
    pub n_test: usize,
    pub beam: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { n_utts: 400, text_ratio: 1.0, gan_aux_k: 9, n_labeled: 5, n_test: 100, beam: 1 }
    }
}

crate::kv_config!(PipelineConfig {
    "n_utts" => n_utts,
    "text_ratio" => text_ratio,
    "gan_aux_k" => gan_aux_k,
    "n_labeled" => n_labeled,
    "n_test" => n_test,
    "beam" => beam,
});

impl GanConfig {
    /// Adversarial tokenizer for the synthetic corpus: one output per label, a slower critic
    /// and stronger smoothness and auxiliary terms than the defaults, which let the critic win
    /// early and the generator collapse onto a few phones at this scale.
    pub fn synthetic(n_labels: usize) -> Self {
        Self {
            vocab: n_labels,
            batch_size: 16,
            gamma_sp: 3.0,
            delta_ss: 3.0,
            lr_d: 1e-4,
            ..Self::default()
        }
    }
}

impl PretrainConfig {
    /// Six-layer, 32-wide encoder over 20 ms MFCC, sized to train in seconds on one core.
    pub fn synthetic(n_labels: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                frontend: Frontend::Features { dim: MfccConfig::default().dim() },
                transformer: TransformerConfig { layers: 6, dim: 32, ffn_dim: 64, heads: 4, buckets: 16, max_distance: 64, dropout: 0.0 },
            },
            layer_k: 3,
            layer_l: 6,
            vocab_k: n_labels,
            vocab_l: 32,
            embed_dim: 16,
            peak_lr: 1e-3,
            steps: 1000,
            batch_size: 8,
            // Phones last about ten frames here, so ten-frame spans would hide whole phones.
            mask: MaskSpec { start_prob: 0.08, span: 5 },
            ..Self::default()
        }
    }
}

/// Everything the synthetic experiments read: corpus, GAN, pre-training and fine-tuning settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub pipeline: PipelineConfig,
    pub gan: GanConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let labels = synth.n_phones + 1;
        Self {
            pipeline: PipelineConfig::default(),
            gan: GanConfig::synthetic(labels),
            pretrain: PretrainConfig::synthetic(labels),
            finetune: FinetuneConfig {
                peak_lr: 2e-3,
                steps: 200,
                batch_size: 4,
                mask: MaskSpec { start_prob: 0.065, span: 5 },
                ..FinetuneConfig::default()
            },
            synth,
        }
    }
}

crate::kv_config!(SynthSpec {
    "n_phones" => n_phones,
    "sample_rate" => sample_rate,
    "frame_ms" => frame_ms,
    "min_frames" => min_frames,
    "max_frames" => max_frames,
    "min_phones" => min_phones,
    "max_phones" => max_phones,
    "noise_level" => noise_level,
    "seed" => seed,
});

const SECTIONS: [&str; 5] = ["synth", "pipeline", "gan", "pretrain", "finetune"];

impl KvConfig for RunConfig {
    fn kv_keys() -> &'static [&'static str] {
        use std::sync::OnceLock;
        static KEYS: OnceLock<Vec<&'static str>> = OnceLock::new();
        KEYS.get_or_init(|| {
            let mut keys = Vec::new();
            for (section, inner) in SECTIONS.iter().zip([
                SynthSpec::kv_keys(),
                PipelineConfig::kv_keys(),
                GanConfig::kv_keys(),
                PretrainConfig::kv_keys(),
                FinetuneConfig::kv_keys(),
            ]) {
                keys.extend(inner.iter().map(|k| &*Box::leak(format!("{section}.{k}").into_boxed_str())));
            }
            keys
        })
    }

    fn kv_get(&self, key: &str) -> Option<String> {
        let (section, rest) = key.split_once('.')?;
        match section {
            "synth" => self.synth.kv_get(rest),
            "pipeline" => self.pipeline.kv_get(rest),
            "gan" => self.gan.kv_get(rest),
            "pretrain" => self.pretrain.kv_get(rest),
            "finetune" => self.finetune.kv_get(rest),
            _ => None,
        }
    }

    fn kv_set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, rest) = key.split_once('.').ok_or_else(|| crate::config::unknown_key(key))?;
        let res = match section {
            "synth" => self.synth.kv_set(rest, value),
            "pipeline" => self.pipeline.kv_set(rest, value),
            "gan" => self.gan.kv_set(rest, value),
            "pretrain" => self.pretrain.kv_set(rest, value),
            "finetune" => self.finetune.kv_set(rest, value),
            _ => return Err(crate::config::unknown_key(key)),
        };
        res.map_err(|e| match e {
            Error::Config(m) if m.starts_with("unknown config key") => crate::config::unknown_key(key),
            other => other,
        })
    }
}

impl RunConfig {
    /// Derives every per-stage seed from one run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gan.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        if !(p.text_ratio >= 0.0 && p.text_ratio.is_finite()) {
            return Err(Error::Config(format!("pipeline.text_ratio must be a non-negative number, got {}", p.text_ratio)));
        }
        let n_speech = p.n_utts.div_ceil(2);
        if p.n_labeled == 0 || p.n_test == 0 || p.n_labeled + p.n_test > n_speech {
            return Err(Error::Config(format!(
                "need 1 ≤ n_labeled, 1 ≤ n_test and n_labeled + n_test ≤ {n_speech} speech utterances"
            )));
        }
        self.gan.validate()?;
        self.pretrain.validate()
    }
}

/// Initialization compared by the end-to-end experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// GAN phones supervise layer k, k-means codes supervise layer L.
    GanAndKmeans,
    KmeansOnly,
    Random,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::GanAndKmeans => "gan+kmeans",
            Init::KmeansOnly => "kmeans",
            Init::Random => "random",
        }
    }
}

/// Phone transcript without silence, shifted past the CTC blank.
pub fn ctc_target(transcript: &[usize], silence: usize) -> Vec<usize> {
    transcript.iter().filter(|&&p| p != silence).map(|&p| p + 1).collect()
}

pub fn phone_ctc_vocab(set: &SyntheticSet) -> Result<CtcVocab> {
    let v = set.synth.vocab();
    CtcVocab::tokens((0..set.synth.spec.n_phones).map(|p| v.symbol(p).unwrap_or("?").to_string()))
}

/// Speech text lines selected by the text ratio: `round(ratio · n_speech)`, capped by what exists.
pub fn text_subset(set: &SyntheticSet, ratio: f64) -> Result<Vec<Vec<usize>>> {
    if ratio <= 0.0 {
        return Err(Error::Config(
            "text_ratio 1:0 leaves no text; adversarial training needs unpaired phone sequences (that row is the speech-only baseline)".into(),
        ));
    }
    let n = ((ratio * set.speech.len() as f64).round() as usize).clamp(1, set.text.len());
    Ok(set.text[..n].to_vec())
}

/// Trains the GAN on stripped speech and labels the full utterances with it.
pub fn gan_targets(set: &SyntheticSet, cfg: &RunConfig) -> Result<(GanRun, Vec<CodeSequence>)> {
    let text = text_subset(set, cfg.pipeline.text_ratio)?;
    let limited = SyntheticSet { text, ..set.clone() };
    let run = run_gan(&limited, &cfg.gan, cfg.pipeline.gan_aux_k)?;
    let full: Vec<FeatureMatrix<f64>> = set.speech.iter().map(|s| s.full.clone()).collect();
    let codes = extract_pseudo_labels(&run.model.generator, &run.model.store, &full)?;
    Ok((run, codes))
}

/// Masked-prediction pre-training for `GanAndKmeans` and `KmeansOnly`; `None` for `Random`.
pub fn pretrain_condition(set: &SyntheticSet, cfg: &RunConfig, init: Init, gan_codes: Option<&[CodeSequence]>) -> Result<Option<PretrainModel>> {
    let use_gan = match init {
        Init::Random => return Ok(None),
        Init::GanAndKmeans => true,
        Init::KmeansOnly => false,
    };
    let gan = match (use_gan, gan_codes) {
        (true, Some(c)) => Some(c),
        (true, None) => return Err(Error::invalid("pipeline", "GAN targets required for the gan+kmeans condition")),
        _ => None,
    };
    let full: Vec<FeatureMatrix<f64>> = set.speech.iter().map(|s| s.full.clone()).collect();
    let refs: Vec<&FeatureMatrix<f64>> = full.iter().collect();
    let (_, km) = kmeans_codes(&refs, cfg.pretrain.vocab_l, cfg.pretrain.seed)?;
    let pcfg = PretrainConfig { use_layer_k: use_gan, ..cfg.pretrain.clone() };
    let corpus: Vec<PretrainUtterance> = full
        .iter()
        .zip(km)
        .enumerate()
        .map(|(i, (f, k))| PretrainUtterance {
            id: f.id.clone(),
            data: EncoderData::Features(f.clone()),
            kmeans: k,
            gan: gan.map(|g| g[i].clone()),
        })
        .collect();
    let mut pm = PretrainModel::new(&pcfg)?;
    pm.encoder.fit_input_norm(&mut pm.store, &full)?;
    Ok(Some(pretrain_from(pm, &pcfg, &corpus, None, |_| {})?.0))
}

/// Fine-tunes from `pre` (or a fresh encoder) on the labeled split and scores the test split.
pub fn finetune_and_score(set: &SyntheticSet, cfg: &RunConfig, init: Init, pre: Option<&PretrainModel>) -> Result<ConditionResult> {
    let vocab = phone_ctc_vocab(set)?;
    let model = match pre {
        Some(pm) => CtcModel::from_pretrained(pm, vocab, cfg.finetune.seed)?,
        None => {
            let full: Vec<FeatureMatrix<f64>> = set.speech.iter().map(|s| s.full.clone()).collect();
            let mut m = CtcModel::new(cfg.pretrain.encoder.clone(), vocab, cfg.finetune.seed)?;
            m.encoder.fit_input_norm(&mut m.store, &full)?;
            m
        }
    };
    let sil = set.silence();
    let labeled: Vec<LabeledUtterance> = set.speech[..cfg.pipeline.n_labeled]
        .iter()
        .map(|s| LabeledUtterance { id: s.id.clone(), data: EncoderData::Features(s.full.clone()), target: ctc_target(&s.transcript, sil) })
        .collect();
    let (model, log) = finetune(model, &labeled, &cfg.finetune, |_| {})?;
    let test = &set.speech[set.speech.len() - cfg.pipeline.n_test..];
    let pairs = test
        .iter()
        .map(|s| Ok((model.transcribe(&EncoderData::Features(s.full.clone()), cfg.pipeline.beam)?, ctc_target(&s.transcript, sil))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionResult { init, per: corpus_error_rate(&pairs)?, final_loss: log.last().map_or(f64::NAN, |e| e.loss) })
}

/// Pre-trains (unless `Random`), fine-tunes on the labeled split and scores the test split.
pub fn pretrain_finetune(set: &SyntheticSet, cfg: &RunConfig, init: Init, gan_codes: Option<&[CodeSequence]>) -> Result<ConditionResult> {
    cfg.validate()?;
    let pre = pretrain_condition(set, cfg, init, gan_codes)?;
    finetune_and_score(set, cfg, init, pre.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionResult {
    pub init: Init,
    pub per: f64,
    pub final_loss: f64,
}

/// PER of the three initializations for one seed, plus the GAN's mapped accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonResult {
    pub seed: u64,
    pub gan_accuracy: f64,
    pub results: Vec<ConditionResult>,
}

impl ComparisonResult {
    pub fn per(&self, init: Init) -> Option<f64> {
        self.results.iter().find(|r| r.init == init).map(|r| r.per)
    }
}

/// Runs all three conditions on the corpus generated by `cfg.synth` with every stage seeded by `seed`.
pub fn compare_inits(cfg: &RunConfig, seed: u64) -> Result<ComparisonResult> {
    let cfg = cfg.clone().with_seed(seed);
    cfg.validate()?;
    let set = prepare_synthetic(cfg.synth.clone(), cfg.pipeline.n_utts, seed)?;
    let (run, codes) = gan_targets(&set, &cfg)?;
    let results = [Init::GanAndKmeans, Init::KmeansOnly, Init::Random]
        .into_iter()
        .map(|init| pretrain_finetune(&set, &cfg, init, Some(&codes)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonResult { seed, gan_accuracy: run.accuracy, results })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub gan_accuracy: f64,
    pub per: f64,
}

/// Sweeps the layer that receives GAN targets; the GAN is trained once and shared.
pub fn ablate_layer_k(cfg: &RunConfig, layers: &[usize], seed: u64) -> Result<Vec<AblationRow>> {
    let cfg = cfg.clone().with_seed(seed);
    for &k in layers {
        PretrainConfig { layer_k: k, ..cfg.pretrain.clone() }.validate()?;
    }
    cfg.validate()?;
    let set = prepare_synthetic(cfg.synth.clone(), cfg.pipeline.n_utts, seed)?;
    let (run, codes) = gan_targets(&set, &cfg)?;
    layers
        .iter()
        .map(|&k| {
            let c = RunConfig { pretrain: PretrainConfig { layer_k: k, ..cfg.pretrain.clone() }, ..cfg.clone() };
            let r = pretrain_finetune(&set, &c, Init::GanAndKmeans, Some(&codes))?;
            Ok(AblationRow { setting: k.to_string(), gan_accuracy: run.accuracy, per: r.per })
        })
        .collect()
}

/// Sweeps the text:speech ratio of the GAN's training data. A zero ratio is rejected before any work.
pub fn ablate_text_ratio(cfg: &RunConfig, ratios: &[f64], seed: u64) -> Result<Vec<AblationRow>> {
    let cfg = cfg.clone().with_seed(seed);
    for &r in ratios {
        if r <= 0.0 {
            return Err(Error::Config(format!(
                "text ratio 1:{r} leaves no text; adversarial training needs unpaired phone sequences (that row is the speech-only baseline)"
            )));
        }
    }
    cfg.validate()?;
    let set = prepare_synthetic(cfg.synth.clone(), cfg.pipeline.n_utts, seed)?;
    ratios
        .iter()
        .map(|&r| {
            let c = RunConfig { pipeline: PipelineConfig { text_ratio: r, ..cfg.pipeline.clone() }, ..cfg.clone() };
            let (run, codes) = gan_targets(&set, &c)?;
            let res = pretrain_finetune(&set, &c, Init::GanAndKmeans, Some(&codes))?;
            Ok(AblationRow { setting: format!("1:{r}"), gan_accuracy: run.accuracy, per: res.per })
        })
        .collect()
}

/// Tab-separated table with a header line.
pub fn ablation_tsv(column: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("{column}\tgan_accuracy\tper\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.setting, r.gan_accuracy, r.per));
    }
    s
}
