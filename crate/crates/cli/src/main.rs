//! `thubert`: the pipeline as subcommands, plus the ablation harness.

mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thubert::audio::{energy_vad_with, frame_align_20ms, load_wav, mfcc, strip_silence, write_fmat, MfccConfig, VadConfig, Waveform};
use thubert::config::KvConfig;
use thubert::ctc::{corpus_error_rate, finetune, read_manifest, tokenize, write_hypotheses, CtcModel, CtcVocab, LabeledUtterance, TokenLevel};
use thubert::encoder::EncoderData;
use thubert::experiments::{ablate_layer_k, ablate_text_ratio, ablation_tsv, compare_inits, Init, RunConfig};
use thubert::gan::{extract_pseudo_labels, train_gan, GanCorpus, GanModel, LossRegistry};
use thubert::kmeans::{assign, fit_kmeans, read_codebook, read_codes, stack_frames, write_codebook, write_codes};
use thubert::pretrain::{layer_activations, pretrain_from, PretrainModel, PretrainUtterance};
use thubert::synthetic::{write_corpus, Synthesizer};
use thubert::text::{read_phoneme_corpus, SIL};
use thubert::FeatureMatrix;

use files::{read_feature_list, read_phones, read_transcripts, require, CliError, Outputs};

/// Text-guided masked-prediction pre-training pipeline.
///
/// Configuration is a flat `section.key=value` file (sections: synth, pipeline, gan,
/// pretrain, finetune); `thubert config` prints every key with its default.
/// THBT_THREADS caps internal parallelism; computation is single-threaded, so every value
/// gives the same bits.
#[derive(Parser, Debug)]
#[command(name = "thubert", version)]
struct Cli {
    /// key=value config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seeds every stage (GAN, pre-training, fine-tuning, corpus generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate inputs and config, print the plan, write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration.
    Config,
    /// Generate a synthetic corpus: wavs, speech manifest, unpaired text, alignments.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// 20 ms MFCC for every wav in a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop non-speech audio with the energy VAD first.
        #[arg(long)]
        strip_silence: bool,
    },
    #[command(subcommand)]
    Kmeans(KmeansCmd),
    #[command(subcommand)]
    Gan(GanCmd),
    /// Masked-prediction pre-training on a feature list.
    Pretrain {
        #[arg(long)]
        feats: PathBuf,
        /// k-means codes supervising the top layer.
        #[arg(long)]
        kmeans_codes: PathBuf,
        /// GAN phone codes supervising layer k (required unless pretrain.use_layer_k=false).
        #[arg(long)]
        gan_codes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// CTC fine-tuning from a pre-trained checkpoint or from scratch.
    Finetune {
        /// Pre-trained checkpoint; omitted means random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        feats: PathBuf,
        /// Manifest with transcripts (`utt<TAB>wav<TAB>phones`).
        #[arg(long)]
        labels: PathBuf,
        /// Phone inventory; silence is excluded from the output vocabulary.
        #[arg(long)]
        phones: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transcribe a feature list with a fine-tuned model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        /// Prefix beam width; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token error rate of hypotheses against references (either may be a manifest).
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Per-utterance table instead of the single corpus rate.
        #[arg(long)]
        tsv: bool,
        /// Score characters instead of whitespace tokens.
        #[arg(long)]
        chars: bool,
    },
    /// End-to-end comparison of initializations on the synthetic corpus.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Ablate(AblateCmd),
}

#[derive(Subcommand, Debug)]
enum KmeansCmd {
    /// Fit a codebook on every frame of a feature list.
    Fit {
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-centroid codes for a feature list.
    Assign {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and assign on hidden states of a pre-trained encoder layer.
    Recluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum GanCmd {
    /// Adversarial training on silence-stripped features and unpaired phone text.
    Train {
        #[arg(long)]
        feats: PathBuf,
        /// Phone index sequences, one utterance per line.
        #[arg(long)]
        text: PathBuf,
        /// k-means codes for the auxiliary head (required when gan.delta_ss > 0).
        #[arg(long)]
        codes: Option<PathBuf>,
        /// Phone inventory; its silence symbol is stripped from the text.
        #[arg(long)]
        phones: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame argmax phone codes.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum AblateCmd {
    /// Sweep the encoder layer that receives GAN targets.
    LayerK {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the text:speech ratio of the GAN's training data (`1:r` for each r).
    TextRatio {
        #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25")]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("THBT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("THBT_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        require(path)?;
        let text = thubert::util::read_to_string(path)?;
        cfg.apply_kv_text(&text, &path.display().to_string())?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.kv_set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let n_threads = threads()?;
    let cfg = resolve_config(&cli)?;
    let seed = cli.seed.unwrap_or(cfg.pretrain.seed);
    log::info!("threads={n_threads} seed={seed}");
    let dry = cli.dry_run;
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_kv_string());
            Ok(())
        }
        Command::SynthData { out } => synth_data(&cfg, seed, &out, dry),
        Command::Features { manifest, out, strip_silence } => features(&manifest, &out, strip_silence, dry),
        Command::Kmeans(cmd) => kmeans(cmd, seed, dry),
        Command::Gan(cmd) => gan(cmd, &cfg, dry),
        Command::Pretrain { feats, kmeans_codes, gan_codes, out } => pretrain(&cfg, &feats, &kmeans_codes, gan_codes.as_deref(), &out, dry),
        Command::Finetune { checkpoint, feats, labels, phones, out } => {
            finetune_cmd(&cfg, checkpoint.as_deref(), &feats, &labels, &phones, &out, dry)
        }
        Command::Decode { model, feats, beam, out } => decode(&model, &feats, beam, &out, dry),
        Command::Score { hyp, reference, tsv, chars } => score(&hyp, &reference, tsv, chars),
        Command::Compare { seeds, out } => compare(&cfg, &seeds, &out, dry),
        Command::Ablate(cmd) => ablate(cmd, &cfg, seed, dry),
    }
}

fn plan(dry: bool, what: &str, inputs: &[&Path], out: &Path, cfg: Option<&RunConfig>) -> bool {
    if dry {
        println!("plan: {what}");
        for i in inputs {
            println!("input: {}", i.display());
        }
        println!("output: {}", out.display());
        if let Some(c) = cfg {
            print!("{}", c.to_kv_string());
        }
    }
    dry
}

fn synth_data(cfg: &RunConfig, seed: u64, out: &Path, dry: bool) -> Result<(), CliError> {
    let synth = Synthesizer::new(cfg.synth.clone())?;
    if plan(dry, &format!("synth-data n_utts={} seed={seed}", cfg.pipeline.n_utts), &[], out, Some(cfg)) {
        return Ok(());
    }
    let corpus = synth.gen_corpus(cfg.pipeline.n_utts, seed)?;
    let files = write_corpus(out, &corpus, &synth.vocab())?;
    let mut o = Outputs::new(out);
    for p in files.wavs.iter().chain([&files.manifest, &files.text, &files.alignments, &files.vocab]) {
        o.add(p);
    }
    o.finish()
}

fn features(manifest: &Path, out: &Path, strip: bool, dry: bool) -> Result<(), CliError> {
    require(manifest)?;
    let entries = read_manifest(manifest)?;
    for e in &entries {
        require(&e.wav)?;
    }
    if plan(dry, &format!("features utts={} strip_silence={strip}", entries.len()), &[manifest], out, None) {
        return Ok(());
    }
    let cfg = MfccConfig::default();
    let vad = VadConfig::default();
    let mut o = Outputs::new(out);
    let mut list = String::new();
    for e in &entries {
        let w: Waveform<f64> = load_wav(&e.wav)?;
        let w = if strip { strip_silence(&w, &vad) } else { w };
        if strip && energy_vad_with(&w, &vad).is_empty() {
            log::warn!("{}: no speech found", e.id);
        }
        let f = frame_align_20ms(&mfcc(&w, &cfg)?)?;
        let path = out.join(format!("{}.fmat", e.id));
        write_fmat(&path, &f)?;
        list.push_str(&format!("{}\t{}\n", e.id, path.display()));
        o.add(&path);
    }
    o.write("feats.tsv", list.as_bytes())?;
    o.finish()
}

fn kmeans(cmd: KmeansCmd, seed: u64, dry: bool) -> Result<(), CliError> {
    match cmd {
        KmeansCmd::Fit { feats, k, max_iters, out } => {
            let fs = read_feature_list(&feats)?;
            if plan(dry, &format!("kmeans fit k={k} max_iters={max_iters} seed={seed}"), &[&feats], &out, None) {
                return Ok(());
            }
            let fit = fit_kmeans(&stack_frames(&fs)?, k, max_iters, seed)?;
            let mut o = Outputs::new(&out);
            let path = out.join("codebook.kmns");
            write_codebook(&path, &fit.codebook)?;
            o.add(&path);
            o.finish()
        }
        KmeansCmd::Assign { codebook, feats, out } => {
            require(&codebook)?;
            let fs = read_feature_list(&feats)?;
            if plan(dry, "kmeans assign", &[&codebook, &feats], &out, None) {
                return Ok(());
            }
            let cb = read_codebook::<f64>(&codebook, "features")?;
            let codes = fs.iter().map(|f| assign(&cb, f)).collect::<thubert::Result<Vec<_>>>()?;
            let mut o = Outputs::new(&out);
            let path = out.join("codes.txt");
            write_codes(&path, &codes)?;
            o.add(&path);
            o.finish()
        }
        KmeansCmd::Recluster { checkpoint, feats, layer, k, out } => {
            require(&checkpoint)?;
            let fs = read_feature_list(&feats)?;
            if plan(dry, &format!("kmeans recluster layer={layer} k={k} seed={seed}"), &[&checkpoint, &feats], &out, None) {
                return Ok(());
            }
            let (model, _, _) = PretrainModel::load(&checkpoint)?;
            let data: Vec<EncoderData> = fs.iter().cloned().map(EncoderData::Features).collect();
            let hidden = layer_activations(&model.encoder, &model.store, &data, layer)?;
            let mut cb = fit_kmeans(&stack_frames(&hidden)?, k, 100, seed)?.codebook;
            cb.source = format!("layer:{layer}");
            let codes = hidden
                .iter()
                .zip(&fs)
                .map(|(h, f)| assign(&cb, h).map(|mut c| {
                    c.id = f.id.clone();
                    c
                }))
                .collect::<thubert::Result<Vec<_>>>()?;
            let mut o = Outputs::new(&out);
            let (cb_path, codes_path) = (out.join("codebook.kmns"), out.join("codes.txt"));
            write_codebook(&cb_path, &cb)?;
            write_codes(&codes_path, &codes)?;
            o.add(&cb_path);
            o.add(&codes_path);
            o.finish()
        }
    }
}

fn gan(cmd: GanCmd, cfg: &RunConfig, dry: bool) -> Result<(), CliError> {
    match cmd {
        GanCmd::Train { feats, text, codes, phones, out } => {
            require(&text)?;
            let fs = read_feature_list(&feats)?;
            let text_seqs = read_phoneme_corpus(&text)?;
            if text_seqs.is_empty() {
                return Err(thubert::Error::Config("text file is empty; adversarial training needs unpaired phone sequences".into()).into());
            }
            let code_seqs = match &codes {
                Some(p) => {
                    // The codebook size is not stored with the codes; the largest code fixes it.
                    let mut seqs = codes_for(p, &fs, usize::MAX)?;
                    let k = seqs.iter().flat_map(|c| c.codes.iter()).max().map_or(1, |&m| m + 1);
                    seqs.iter_mut().for_each(|c| c.vocab_size = k);
                    seqs
                }
                None if cfg.gan.delta_ss > 0.0 => {
                    return Err(CliError::Usage("--codes is required when gan.delta_ss > 0".into()));
                }
                None => Vec::new(),
            };
            let silence = match &phones {
                Some(p) => read_phones(p)?.index_of(SIL),
                None => None,
            };
            let mut inputs: Vec<&Path> = vec![&feats, &text];
            inputs.extend(codes.as_deref());
            if plan(dry, "gan train", &inputs, &out, Some(cfg)) {
                return Ok(());
            }
            let corpus = GanCorpus { speech: &fs, codes: &code_seqs, text: &text_seqs, silence };
            let mut o = Outputs::new(&out);
            let mut log = String::new();
            let (model, _) = train_gan(&cfg.gan, corpus, &LossRegistry::default(), |e| {
                log.push_str(&serde_json::to_string(e).expect("log entries serialize"));
                log.push('\n');
            })?;
            let path = out.join("gan.thbt");
            model.save(&path)?;
            o.add(&path);
            o.add(&thubert::pretrain::sidecar_path(&path));
            o.write("gan_log.jsonl", log.as_bytes())?;
            o.finish()
        }
        GanCmd::Extract { model, feats, out } => {
            require(&model)?;
            let fs = read_feature_list(&feats)?;
            if plan(dry, "gan extract", &[&model, &feats], &out, None) {
                return Ok(());
            }
            let m = GanModel::load(&model)?;
            let labels = extract_pseudo_labels(&m.generator, &m.store, &fs)?;
            let mut o = Outputs::new(&out);
            let path = out.join("codes.txt");
            write_codes(&path, &labels)?;
            o.add(&path);
            o.finish()
        }
    }
}

/// Codes for every utterance of `feats`, in feature-list order.
fn codes_for(path: &Path, feats: &[FeatureMatrix], vocab: usize) -> Result<Vec<thubert::kmeans::CodeSequence>, CliError> {
    require(path)?;
    let mut by_id: std::collections::HashMap<String, thubert::kmeans::CodeSequence> =
        read_codes(path, vocab)?.into_iter().map(|c| (c.id.clone(), c)).collect();
    feats
        .iter()
        .map(|f| {
            by_id
                .remove(&f.id)
                .ok_or_else(|| CliError::MissingInput(format!("{}: no codes for utterance {}", path.display(), f.id)))
        })
        .collect()
}

fn pretrain(cfg: &RunConfig, feats: &Path, kmeans_codes: &Path, gan_codes: Option<&Path>, out: &Path, dry: bool) -> Result<(), CliError> {
    let fs = read_feature_list(feats)?;
    let pcfg = &cfg.pretrain;
    let km = codes_for(kmeans_codes, &fs, pcfg.vocab_l)?;
    let gan = match (gan_codes, pcfg.use_layer_k) {
        (Some(p), true) => Some(codes_for(p, &fs, pcfg.vocab_k)?),
        (None, true) => return Err(CliError::Usage("--gan-codes is required unless pretrain.use_layer_k=false".into())),
        _ => None,
    };
    let mut inputs = vec![feats, kmeans_codes];
    inputs.extend(gan_codes);
    if plan(dry, "pretrain", &inputs, out, Some(cfg)) {
        return Ok(());
    }
    let corpus: Vec<PretrainUtterance> = fs
        .iter()
        .zip(km)
        .enumerate()
        .map(|(i, (f, k))| PretrainUtterance {
            id: f.id.clone(),
            data: EncoderData::Features(f.clone()),
            kmeans: k,
            gan: gan.as_ref().map(|g| g[i].clone()),
        })
        .collect();
    let mut model = PretrainModel::new(pcfg)?;
    model.encoder.fit_input_norm(&mut model.store, &fs)?;
    let mut o = Outputs::new(out);
    let path = out.join("pretrain.thbt");
    let mut log = String::new();
    pretrain_from(model, pcfg, &corpus, Some(&path), |e| {
        log.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        log.push('\n');
    })?;
    o.add(&path);
    o.add(&thubert::pretrain::sidecar_path(&path));
    o.write("pretrain_log.jsonl", log.as_bytes())?;
    o.finish()
}

fn finetune_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, feats: &Path, labels: &Path, phones: &Path, out: &Path, dry: bool) -> Result<(), CliError> {
    let fs = read_feature_list(feats)?;
    require(labels)?;
    let inventory = read_phones(phones)?;
    let vocab = CtcVocab::tokens(inventory.symbols().iter().filter(|s| *s != SIL).cloned())?;
    let transcripts = read_transcripts(labels)?;
    let by_id: std::collections::HashMap<&str, &FeatureMatrix> = fs.iter().map(|f| (f.id.as_str(), f)).collect();
    let corpus = transcripts
        .iter()
        .map(|(id, text)| {
            let f = by_id
                .get(id.as_str())
                .ok_or_else(|| CliError::MissingInput(format!("{}: no features for utterance {id}", feats.display())))?;
            Ok(LabeledUtterance { id: id.clone(), data: EncoderData::Features((*f).clone()), target: vocab.encode(text)? })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if let Some(c) = checkpoint {
        require(c)?;
    }
    let mut inputs = vec![feats, labels, phones];
    inputs.extend(checkpoint);
    if plan(dry, &format!("finetune init={}", if checkpoint.is_some() { "pretrained" } else { "random" }), &inputs, out, Some(cfg)) {
        return Ok(());
    }
    let model = match checkpoint {
        Some(c) => CtcModel::from_pretrained(&PretrainModel::load(c)?.0, vocab, cfg.finetune.seed)?,
        None => {
            let mut m = CtcModel::new(cfg.pretrain.encoder.clone(), vocab, cfg.finetune.seed)?;
            m.encoder.fit_input_norm(&mut m.store, &fs)?;
            m
        }
    };
    let mut log = String::new();
    let (model, _) = finetune(model, &corpus, &cfg.finetune, |e| {
        log.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        log.push('\n');
    })?;
    let mut o = Outputs::new(out);
    let path = out.join("ctc.thbt");
    model.save(&path)?;
    o.add(&path);
    o.add(&thubert::pretrain::sidecar_path(&path));
    o.write("finetune_log.jsonl", log.as_bytes())?;
    o.finish()
}

fn decode(model: &Path, feats: &Path, beam: usize, out: &Path, dry: bool) -> Result<(), CliError> {
    require(model)?;
    let fs = read_feature_list(feats)?;
    if plan(dry, &format!("decode beam={beam}"), &[model, feats], out, None) {
        return Ok(());
    }
    let m = CtcModel::load(model)?;
    let hyps = fs
        .iter()
        .map(|f| Ok((f.id.clone(), m.vocab.decode(&m.transcribe(&EncoderData::Features(f.clone()), beam)?))))
        .collect::<thubert::Result<Vec<_>>>()?;
    let mut o = Outputs::new(out);
    let path = out.join("hyp.tsv");
    write_hypotheses(&path, &hyps)?;
    o.add(&path);
    o.finish()
}

fn score(hyp: &Path, reference: &Path, tsv: bool, chars: bool) -> Result<(), CliError> {
    let hyps: std::collections::HashMap<String, String> = read_transcripts(hyp)?.into_iter().collect();
    let refs = read_transcripts(reference)?;
    let level = if chars { TokenLevel::Char } else { TokenLevel::Word };
    let mut pairs = Vec::with_capacity(refs.len());
    let mut rows = String::from("utt\terrors\tref_len\trate\n");
    for (id, r) in &refs {
        let h = hyps
            .get(id)
            .ok_or_else(|| CliError::MissingInput(format!("{}: no hypothesis for utterance {id}", hyp.display())))?;
        let (h, r) = (tokenize(h, level), tokenize(r, level));
        let errors = thubert::ctc::edit_distance(&h, &r);
        let rate = if r.is_empty() { 0.0 } else { errors as f64 / r.len() as f64 };
        rows.push_str(&format!("{id}\t{errors}\t{}\t{rate:.4}\n", r.len()));
        pairs.push((h, r));
    }
    let total = corpus_error_rate(&pairs)?;
    if tsv {
        print!("{rows}");
        println!("TOTAL\t\t\t{total:.4}");
    } else {
        println!("{total:.4}");
    }
    Ok(())
}

fn compare(cfg: &RunConfig, seeds: &[u64], out: &Path, dry: bool) -> Result<(), CliError> {
    if plan(dry, &format!("compare seeds={seeds:?}"), &[], out, Some(cfg)) {
        return Ok(());
    }
    let mut o = Outputs::new(out);
    let inits = [Init::GanAndKmeans, Init::KmeansOnly, Init::Random];
    let mut table = String::from("seed\tgan_accuracy");
    for i in inits {
        table.push_str(&format!("\tper_{}", i.name()));
    }
    table.push('\n');
    for &s in seeds {
        let r = compare_inits(cfg, s)?;
        table.push_str(&format!("{s}\t{:.4}", r.gan_accuracy));
        for i in inits {
            table.push_str(&format!("\t{:.4}", r.per(i).unwrap_or(f64::NAN)));
        }
        table.push('\n');
    }
    o.write("compare.tsv", table.as_bytes())?;
    print!("{table}");
    o.finish()
}

fn ablate(cmd: AblateCmd, cfg: &RunConfig, seed: u64, dry: bool) -> Result<(), CliError> {
    let (name, table) = match cmd {
        AblateCmd::LayerK { layers, out } => {
            if plan(dry, &format!("ablate layer-k layers={layers:?} seed={seed}"), &[], &out, Some(cfg)) {
                return Ok(());
            }
            (out.join("layer_k.tsv"), ablation_tsv("layer_k", &ablate_layer_k(cfg, &layers, seed)?))
        }
        AblateCmd::TextRatio { ratios, out } => {
            // Checked before planning so a text-free request fails without doing anything.
            if let Some(r) = ratios.iter().find(|&&r| r <= 0.0) {
                return Err(thubert::Error::Config(format!(
                    "text ratio 1:{r} leaves no text; adversarial training needs unpaired phone sequences (that row is the speech-only baseline)"
                ))
                .into());
            }
            if plan(dry, &format!("ablate text-ratio ratios={ratios:?} seed={seed}"), &[], &out, Some(cfg)) {
                return Ok(());
            }
            (out.join("text_ratio.tsv"), ablation_tsv("speech:text", &ablate_text_ratio(cfg, &ratios, seed)?))
        }
    };
    let dir = name.parent().expect("joined path has a parent").to_path_buf();
    let mut o = Outputs::new(&dir);
    o.write(name.file_name().and_then(|n| n.to_str()).expect("fixed name"), table.as_bytes())?;
    print!("{table}");
    o.finish()
}
