//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach stdout. Set
//! `THBT_ACCEPTANCE=1,2,5` to run a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thubert::ctc::{collapse_path, ctc_beam_decode, ctc_loss, min_frames, CtcModel, CtcVocab, BLANK};
use thubert::encoder::{
    output_length, sample_mask, ConvEncoderConfig, EncoderConfig, EncoderData, Frontend, MaskSpec, TransformerConfig,
};
use thubert::experiments::{finetune_and_score, gan_targets, prepare_synthetic, pretrain_condition, Init, RunConfig};
use thubert::gan::{critic_loss, generator_loss, loss_pd, loss_sp_batch, loss_ss_batch, one_hot, GanConfig, GanModel, LossRegistry};
use thubert::kmeans::{assign, fit_kmeans, CodeSequence};
use thubert::pretrain::{utterance_loss, PretrainConfig, PretrainModel};
use thubert::rng::seeded;
use thubert::tensor::finite_diff_check_params;
use thubert::{FeatureMatrix, Graph, ParamStore, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// State shared between criteria: the adversarial runs of criterion 6 feed criterion 7.
#[derive(Default)]
struct Shared {
    gan: HashMap<u64, (f64, Vec<CodeSequence>)>,
}

fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng, spread: f64) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = log_softmax_rows(x);
    out.data_mut().iter_mut().for_each(|v| *v = v.exp());
    out
}

fn feats(t: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    FeatureMatrix::new(rand_matrix(t, d, rng, 1.0), 20, "u").unwrap()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Verdict {
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64, tol: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err, tol)),
    };
    let reg = LossRegistry::default();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gcfg = GanConfig {
            vocab: 4,
            gen_kernel: 3,
            disc_channels: 5,
            disc_kernel: 3,
            lambda_gp: 0.0,
            gamma_sp: 0.0,
            eta_pd: 0.0,
            delta_ss: 0.0,
            seed,
            ..GanConfig::default()
        };
        let model = GanModel::new(&gcfg, 3, 5).unwrap();
        let real: Vec<Tensor> = (0..2).map(|i| one_hot(&[i, 2, 3, 1, 0][..3 + i], 4).unwrap()).collect();
        let fake: Vec<Tensor> = (0..2).map(|i| softmax_rows(&rand_matrix(4 - i, 4, &mut rng, 2.0))).collect();
        let (gen, disc) = (&model.generator, &model.discriminator);
        let d_term = |lambda: f64| {
            finite_diff_check_params(
                &model.store,
                |g, s| Ok(critic_loss(g, s, disc, &reg, &real, &fake, lambda, &mut seeded(seed + 100))?.total),
                1e-6,
                40,
            )
            .unwrap()
        };
        record("L_gan (critic)", d_term(0.0), 1e-4);
        record("L_gan + L_gp (critic, double backward)", d_term(1.5), 1e-3);

        let batch = [feats(6, 3, &mut rng), feats(5, 3, &mut rng)];
        let refs: Vec<&FeatureMatrix> = batch.iter().collect();
        let codes: Vec<Vec<usize>> = batch.iter().map(|f| (0..f.num_frames()).map(|_| rng.random_range(0..5)).collect()).collect();
        let code_refs: Vec<&[usize]> = codes.iter().map(Vec::as_slice).collect();
        let g_err = finite_diff_check_params(
            &model.store,
            |g, s| Ok(generator_loss(g, s, gen, disc, &reg, &gcfg, &refs, None)?.total),
            1e-6,
            40,
        )
        .unwrap();
        record("L_gan (generator)", g_err, 1e-4);
        let term = |which: usize| {
            finite_diff_check_params(
                &model.store,
                |g, s| {
                    let out = gen.forward(g, s, &refs, true)?;
                    match which {
                        0 => loss_sp_batch(g, &out.probs),
                        1 => loss_pd(g, &out.probs),
                        _ => loss_ss_batch(g, &out.aux_logits, &code_refs),
                    }
                },
                1e-6,
                40,
            )
            .unwrap()
        };
        record("L_sp", term(0), 1e-4);
        record("L_pd", term(1), 1e-4);
        record("L_ss", term(2), 1e-4);

        // Masked prediction through both cosine-similarity heads of a two-layer encoder.
        let pcfg = PretrainConfig {
            encoder: EncoderConfig {
                frontend: Frontend::Features { dim: 4 },
                transformer: TransformerConfig { layers: 2, dim: 8, ffn_dim: 12, heads: 2, ..TransformerConfig::default() },
            },
            layer_k: 1,
            layer_l: 2,
            vocab_k: 3,
            vocab_l: 5,
            embed_dim: 6,
            seed,
            ..PretrainConfig::default()
        };
        let pm = PretrainModel::new(&pcfg).unwrap();
        let data = EncoderData::Features(feats(8, 4, &mut rng));
        let km: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
        let gan: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let mut mask = sample_mask(8, &MaskSpec { start_prob: 0.3, span: 2 }, &mut rng);
        mask[3] = true;
        let err = finite_diff_check_params(
            &pm.store,
            |g: &mut Graph, s: &ParamStore| utterance_loss(g, s, &pm, &pcfg, &data, &km, Some(&gan), &mask),
            1e-5,
            12,
        )
        .unwrap();
        record("masked prediction", err, 1e-4);

        // CTC: the loss's own gradient, then end to end through a fine-tuning model.
        let t = rng.random_range(3..=6);
        let target: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..4)).collect();
        let lp = log_softmax_rows(&rand_matrix(t, 4, &mut rng, 2.0));
        let (_, grad) = ctc_loss(&lp, &target, BLANK).unwrap();
        let eps = 1e-6;
        let mut ctc_err: f64 = 0.0;
        for i in 0..lp.numel() {
            let mut plus = lp.clone();
            plus.data_mut()[i] += eps;
            let mut minus = lp.clone();
            minus.data_mut()[i] -= eps;
            let num = (ctc_loss(&plus, &target, BLANK).unwrap().0 - ctc_loss(&minus, &target, BLANK).unwrap().0) / (2.0 * eps);
            ctc_err = ctc_err.max((grad.data()[i] - num).abs() / num.abs().max(1.0));
        }
        record("CTC", ctc_err, 1e-4);
        let vocab = CtcVocab::tokens(["a", "b", "c"].map(String::from)).unwrap();
        let cm = CtcModel::new(pcfg.encoder.clone(), vocab, seed).unwrap();
        let data = EncoderData::Features(feats(7, 4, &mut rng));
        let err = finite_diff_check_params(
            &cm.store,
            |g: &mut Graph, s: &ParamStore| {
                let lp = cm.log_probs(g, s, &data, None, false)?;
                cm.ctc_node(g, lp, &[1, 3, 3])
            },
            1e-5,
            12,
        )
        .unwrap();
        record("CTC through encoder", err, 1e-4);
    }
    let pass = worst.iter().all(|(_, e, tol)| e < tol);
    let detail = worst.iter().map(|(n, e, tol)| format!("{n} {e:.1e}/{tol:.0e}")).collect::<Vec<_>>().join(", ");
    Verdict::new(pass, format!("10 seeds; worst relative error: {detail}"))
}

// ---------------------------------------------------------------- 2

fn all_paths(lp: &Tensor) -> Vec<(Vec<usize>, f64)> {
    let (t, v) = (lp.rows(), lp.cols());
    (0..v.pow(t as u32))
        .map(|code| {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            let mut logp = 0.0;
            for f in 0..t {
                path.push(c % v);
                logp += lp.row(f)[c % v];
                c /= v;
            }
            (path, logp.exp())
        })
        .collect()
}

fn ctc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let n = 1000;
    for _ in 0..n {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(2..=4);
        let target: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..v)).collect();
        let lp = log_softmax_rows(&rand_matrix(t, v, &mut rng, 3.0));
        let mass: f64 = all_paths(&lp).into_iter().filter(|(p, _)| collapse_path(p, BLANK) == target).map(|(_, p)| p).sum();
        match ctc_loss(&lp, &target, BLANK) {
            Ok((loss, _)) => worst = worst.max((loss + mass.ln()).abs()),
            Err(_) => {
                if t >= min_frames(&target) || mass != 0.0 {
                    bad += 1;
                }
            }
        }
    }
    let mut beam_bad = 0;
    let m = 300;
    for _ in 0..m {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(2..=4);
        let lp = log_softmax_rows(&rand_matrix(t, v, &mut rng, 2.0));
        let mut by_prefix: HashMap<Vec<usize>, f64> = HashMap::new();
        for (p, pr) in all_paths(&lp) {
            *by_prefix.entry(collapse_path(&p, BLANK)).or_default() += pr;
        }
        let best = by_prefix.values().cloned().fold(0.0, f64::max);
        let (hyp, score) = ctc_beam_decode(&lp, BLANK, by_prefix.len());
        if (by_prefix[&hyp] - best).abs() > 1e-12 * best.max(1e-300) + 1e-15 || (score.exp() - best).abs() > 1e-12 {
            beam_bad += 1;
        }
    }
    Verdict::new(
        worst < 1e-9 && bad == 0 && beam_bad == 0,
        format!("{n} loss instances, max |loss - enumeration| {worst:.1e} (tol 1e-9), {bad} infeasibility mismatches; {m} exhaustive-beam instances, {beam_bad} mismatches"),
    )
}

// ---------------------------------------------------------------- 3

fn kmeans() -> Verdict {
    let (mut monotone_bad, mut assign_bad) = (0, 0);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..80);
        let d = rng.random_range(1..5);
        let k = rng.random_range(1..8.min(n));
        let points = rand_matrix(n, d, &mut rng, 1.0);
        let fit = fit_kmeans(&points, k, 50, seed).unwrap();
        if fit.distortion.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
            monotone_bad += 1;
        }
        let f = FeatureMatrix::new(points.clone(), 20, "u").unwrap();
        let codes = assign(&fit.codebook, &f).unwrap();
        for (i, &c) in codes.codes.iter().enumerate() {
            let dist = |j: usize| -> f64 { points.row(i).iter().zip(fit.codebook.centroids.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
            let best = (0..k).fold(0, |b, j| if dist(j) < dist(b) { j } else { b });
            if dist(c) > dist(best) {
                assign_bad += 1;
            }
        }
    }
    Verdict::new(
        monotone_bad == 0 && assign_bad == 0,
        format!("100 datasets: {monotone_bad} with increasing distortion, {assign_bad} assignments worse than exhaustive nearest neighbour"),
    )
}

// ---------------------------------------------------------------- 4

fn simulate_frames(n: usize, cfg: &ConvEncoderConfig) -> Option<usize> {
    let mut len = n;
    for (&k, &s) in cfg.kernels.iter().zip(&cfg.strides) {
        let mut count = 0;
        let mut start = 0;
        while start + k <= len {
            count += 1;
            start += s;
        }
        if count == 0 {
            return None;
        }
        len = count;
    }
    Some(len)
}

fn geometry() -> Verdict {
    let cfg = ConvEncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mismatches = (0..200)
        .filter(|_| {
            let n = rng.random_range(300..60_000);
            cfg.output_length(n).ok() != simulate_frames(n, &cfg)
        })
        .count();
    let one_second = output_length(16000).unwrap();
    let spec = MaskSpec { start_prob: 0.08, span: 10 };
    let coverage = (0..100u64)
        .map(|s| sample_mask(1000, &spec, &mut ChaCha8Rng::seed_from_u64(s)).iter().filter(|&&m| m).count() as f64 / 1000.0)
        .sum::<f64>()
        / 100.0;
    let expect = 1.0 - 0.92f64.powi(10);
    Verdict::new(
        mismatches == 0 && one_second == 49 && (coverage - expect).abs() <= 0.05,
        format!("{mismatches}/200 length mismatches; 16000 samples -> {one_second} frames; mask coverage {coverage:.4} vs {expect:.4} ± 0.05"),
    )
}

// ---------------------------------------------------------------- 5

fn masked_prediction() -> Verdict {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PretrainConfig {
            encoder: EncoderConfig {
                frontend: Frontend::Features { dim: 4 },
                transformer: TransformerConfig { layers: 2, dim: 8, ffn_dim: 12, heads: 2, ..TransformerConfig::default() },
            },
            layer_k: 1,
            layer_l: 2,
            vocab_k: 3,
            vocab_l: 7,
            embed_dim: 5,
            seed,
            ..PretrainConfig::default()
        };
        let mut model = PretrainModel::new(&cfg).unwrap();
        let t = 20;
        let data = EncoderData::Features(feats(t, 4, &mut rng));
        let km: Vec<usize> = (0..t).map(|_| rng.random_range(0..7)).collect();
        let gan: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
        let loss = |model: &PretrainModel, km: &[usize], gan: &[usize], mask: &[bool]| {
            let mut g = Graph::new(0);
            let v = utterance_loss(&mut g, &model.store, model, &cfg, &data, km, Some(gan), mask).unwrap();
            g.value(v).item()
        };
        ok &= loss(&model, &km, &gan, &vec![false; t]) == 0.0;

        let mask = sample_mask(t, &MaskSpec { start_prob: 0.2, span: 3 }, &mut rng);
        let base = loss(&model, &km, &gan, &mask);
        let (mut km2, mut gan2) = (km.clone(), gan.clone());
        for i in (0..t).filter(|&i| !mask[i]) {
            km2[i] = (km2[i] + 1 + rng.random_range(0..6)) % 7;
            gan2[i] = (gan2[i] + 1) % 3;
        }
        ok &= loss(&model, &km2, &gan2, &mask).to_bits() == base.to_bits();

        for h in [model.head_k.clone().unwrap(), model.head_l.clone()] {
            let e = model.store.get_mut(h.emb);
            let row = e.row(0).to_vec();
            for c in 0..h.vocab {
                e.row_mut(c).copy_from_slice(&row);
            }
        }
        let m = mask.iter().filter(|&&x| x).count() as f64;
        let want = m * (3f64.ln() + 7f64.ln());
        worst = worst.max((loss(&model, &km, &gan, &mask) - want).abs() / want.max(1.0));
    }
    Verdict::new(
        ok && worst < 1e-10,
        format!("10 seeds: empty mask exactly 0, unmasked-target perturbation bit-identical: {ok}; identical-embedding closed form rel err {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 6 and 7

fn gan_oracle(shared: &mut Shared) -> Verdict {
    let cfg = RunConfig::default();
    let mut accs = Vec::new();
    for seed in SEEDS {
        let c = cfg.clone().with_seed(seed);
        let set = prepare_synthetic(c.synth.clone(), c.pipeline.n_utts, seed).unwrap();
        let (run, codes) = gan_targets(&set, &c).unwrap();
        accs.push(run.accuracy);
        shared.gan.insert(seed, (run.accuracy, codes));
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Verdict::new(
        mean >= 0.75,
        format!(
            "{} phones + SIL, {} speech / {} text utterances, {} steps; mapped frame accuracy {:?}, mean {mean:.4} (need >= 0.75, chance 0.125)",
            cfg.synth.n_phones,
            cfg.pipeline.n_utts.div_ceil(2),
            cfg.pipeline.n_utts / 2,
            cfg.gan.steps,
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn end_to_end(shared: &mut Shared) -> Verdict {
    let cfg = RunConfig::default();
    let mut rows = Vec::new();
    for seed in SEEDS {
        let c = cfg.clone().with_seed(seed);
        let set = prepare_synthetic(c.synth.clone(), c.pipeline.n_utts, seed).unwrap();
        let codes = match shared.gan.remove(&seed) {
            Some((_, codes)) => codes,
            None => gan_targets(&set, &c).unwrap().1,
        };
        let per: Vec<f64> = [Init::GanAndKmeans, Init::KmeansOnly, Init::Random]
            .into_iter()
            .map(|init| {
                let pre = pretrain_condition(&set, &c, init, Some(&codes)).unwrap();
                finetune_and_score(&set, &c, init, pre.as_ref()).unwrap().per
            })
            .collect();
        rows.push(per);
    }
    let ordered = rows.iter().filter(|p| p[0] < p[1] && p[1] < p[2]).count();
    let mean = |i: usize| rows.iter().map(|p| p[i]).sum::<f64>() / rows.len() as f64;
    let improvement = 1.0 - mean(0) / mean(2);
    let table = rows
        .iter()
        .zip(SEEDS)
        .map(|(p, s)| format!("seed {s}: {:.4} / {:.4} / {:.4}", p[0], p[1], p[2]))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict::new(
        ordered >= 2 && improvement >= 0.30,
        format!(
            "PER gan+kmeans / kmeans / random: {table}; ordering held in {ordered}/3 (need 2), mean relative improvement {:.1}% (need 30%)",
            improvement * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 8 and 9

fn thubert(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_thubert")).args(args).env("THBT_THREADS", "1").output().unwrap()
}

/// Overrides that keep the harness runs to seconds.
const TINY: [&str; 16] = [
    "--set", "pipeline.n_utts=60",
    "--set", "pipeline.n_labeled=4",
    "--set", "pipeline.n_test=6",
    "--set", "gan.steps=30",
    "--set", "pretrain.steps=15",
    "--set", "finetune.steps=15",
    "--set", "pretrain.layer_l=6",
    "--set", "pretrain.batch_size=4",
];

fn table_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

fn ablations() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = |n: &str| dir.path().join(n).display().to_string();
    let (lk, tr, none) = (out("layer_k"), out("text_ratio"), out("none"));
    let mut args = vec!["ablate", "layer-k", "--layers", "2,3,4,5", "--out", &lk];
    args.extend(TINY);
    let a = thubert(&args);
    let rows = table_rows(&dir.path().join("layer_k/layer_k.tsv"));
    let layers: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    let layer_ok = a.status.success() && layers == ["2", "3", "4", "5"] && rows.iter().all(|r| r.len() == 3 && r[2].parse::<f64>().is_ok());

    let mut args = vec!["ablate", "text-ratio", "--ratios", "1,0.5,0.25", "--out", &tr];
    args.extend(TINY);
    let b = thubert(&args);
    let rows = table_rows(&dir.path().join("text_ratio/text_ratio.tsv"));
    let ratio_ok = b.status.success() && rows.len() == 3 && rows.iter().all(|r| r.len() == 3 && r[2].parse::<f64>().is_ok());

    let start = Instant::now();
    let mut args = vec!["ablate", "text-ratio", "--ratios", "1,0", "--out", &none];
    args.extend(TINY);
    let c = thubert(&args);
    let elapsed = start.elapsed().as_secs_f64();
    let stderr = String::from_utf8_lossy(&c.stderr).to_string();
    let fail_fast = !c.status.success() && elapsed < 5.0 && stderr.contains("no text") && !dir.path().join("none").exists();
    Verdict::new(
        layer_ok && ratio_ok && fail_fast,
        format!(
            "layer-k rows {layers:?} complete: {layer_ok}; text-ratio 3 rows complete: {ratio_ok}; 1:0 rejected in {elapsed:.2}s with {}: {fail_fast}",
            stderr.trim()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let run = |args: &[&str]| {
        let o = thubert(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let seed = ["--seed", "7", "--set", "pipeline.n_utts=20", "--set", "pipeline.n_labeled=4", "--set", "pipeline.n_test=4"];
    fn with<'a>(a: &[&'a str], seed: &[&'a str]) -> Vec<&'a str> {
        a.iter().chain(seed).copied().collect()
    }
    run(&with(&["synth-data", "--out", &p("corpus")], &seed));
    let manifest = p("corpus/speech.tsv");
    run(&with(&["features", "--manifest", &manifest, "--out", &p("full")], &seed));
    run(&with(&["features", "--manifest", &manifest, "--strip-silence", "--out", &p("stripped")], &seed));
    run(&with(&["kmeans", "fit", "--feats", &p("full/feats.tsv"), "--k", "32", "--out", &p("km")], &seed));
    run(&with(&["kmeans", "assign", "--codebook", &p("km/codebook.kmns"), "--feats", &p("full/feats.tsv"), "--out", &p("km")], &seed));
    run(&with(&["kmeans", "fit", "--feats", &p("stripped/feats.tsv"), "--k", "9", "--out", &p("aux")], &seed));
    run(&with(&["kmeans", "assign", "--codebook", &p("aux/codebook.kmns"), "--feats", &p("stripped/feats.tsv"), "--out", &p("aux")], &seed));
    run(&with(&[
        "gan", "train", "--feats", &p("stripped/feats.tsv"), "--text", &p("corpus/text.txt"), "--codes", &p("aux/codes.txt"),
        "--phones", &p("corpus/phones.txt"), "--out", &p("gan"), "--set", "gan.steps=10",
    ], &seed));
    run(&with(&["gan", "extract", "--model", &p("gan/gan.thbt"), "--feats", &p("full/feats.tsv"), "--out", &p("gan")], &seed));
    for out in ["pre_a", "pre_b"] {
        run(&with(&[
            "pretrain", "--feats", &p("full/feats.tsv"), "--kmeans-codes", &p("km/codes.txt"), "--gan-codes", &p("gan/codes.txt"),
            "--out", &p(out), "--set", "pretrain.steps=50",
        ], &seed));
    }
    let a = std::fs::read(dir.path().join("pre_a/pretrain.thbt")).unwrap();
    let b = std::fs::read(dir.path().join("pre_b/pretrain.thbt")).unwrap();
    let logs_equal =
        std::fs::read(dir.path().join("pre_a/pretrain_log.jsonl")).unwrap() == std::fs::read(dir.path().join("pre_b/pretrain_log.jsonl")).unwrap();
    Verdict::new(
        a == b && logs_equal,
        format!("two 50-step runs, seed 7, THBT_THREADS=1: checkpoints {} bytes, identical: {}, logs identical: {logs_equal}", a.len(), a == b),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("THBT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    type Check = fn(&mut Shared) -> Verdict;
    let criteria: [(usize, &str, Check); 9] = [
        (1, "gradient correctness", |_| gradients()),
        (2, "CTC oracle equivalence", |_| ctc_oracle()),
        (3, "k-means", |_| kmeans()),
        (4, "encoder geometry", |_| geometry()),
        (5, "masked-prediction semantics", |_| masked_prediction()),
        (6, "GAN tokenizer synthetic oracle", gan_oracle),
        (7, "end-to-end benefit", end_to_end),
        (8, "ablation harness", |_| ablations()),
        (9, "determinism", |_| determinism()),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                Verdict::new(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        let tag = if verdict.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {n} ({name}) [{:.0}s]: {}", start.elapsed().as_secs_f64(), verdict.detail);
        failed += usize::from(!verdict.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
