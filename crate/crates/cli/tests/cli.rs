use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use thubert::config::KvConfig;
use thubert::experiments::RunConfig;

fn thubert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thubert")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = thubert(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap()
}

const SMALL: [&str; 8] = ["--seed", "3", "--set", "pipeline.n_utts=16", "--set", "pipeline.n_labeled=3", "--set", "pipeline.n_test=3"];

fn corpus(dir: &Path) -> String {
    let out = dir.join("corpus").display().to_string();
    let mut args = vec!["synth-data", "--out", &out];
    args.extend(SMALL);
    ok(&args);
    let manifest = dir.join("corpus/speech.tsv").display().to_string();
    let feats = dir.join("full").display().to_string();
    ok(&["features", "--manifest", &manifest, "--out", &feats]);
    dir.join("full/feats.tsv").display().to_string()
}

#[test]
fn identical_hypothesis_scores_zero() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("h.tsv");
    std::fs::write(&f, "u1\tAH B K\nu2\tK K\n").unwrap();
    let f = f.display().to_string();
    assert_eq!(ok(&["score", "--hyp", &f, "--ref", &f]).trim(), "0.0000");
}

#[test]
fn score_counts_edits() {
    let dir = TempDir::new().unwrap();
    let (h, r) = (dir.path().join("h"), dir.path().join("r"));
    std::fs::write(&h, "u1\tA B\n").unwrap();
    std::fs::write(&r, "u1\tA C D E\n").unwrap();
    let out = ok(&["score", "--hyp", &h.display().to_string(), "--ref", &r.display().to_string()]);
    assert_eq!(out.trim(), "0.7500");
}

#[test]
fn kmeans_assign_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let feats = corpus(dir.path());
    let p = |n: &str| dir.path().join(n).display().to_string();
    ok(&["kmeans", "fit", "--feats", &feats, "--k", "5", "--out", &p("km")]);
    ok(&["kmeans", "assign", "--codebook", &p("km/codebook.kmns"), "--feats", &feats, "--out", &p("a")]);
    ok(&["kmeans", "assign", "--codebook", &p("km/codebook.kmns"), "--feats", &feats, "--out", &p("b")]);
    let a = std::fs::read(dir.path().join("a/codes.txt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, std::fs::read(dir.path().join("b/codes.txt")).unwrap());
    assert!(dir.path().join("a/MANIFEST").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let e = error_json(&thubert(&["--set", "pretrain.no_such_key=1", "config"]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("no_such_key"));

    let dir = TempDir::new().unwrap();
    let f = dir.path().join("run.cfg");
    std::fs::write(&f, "gan.steps = 10\nbogus = 2\n").unwrap();
    let o = thubert(&["--config", &f.display().to_string(), "config"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "parse");
    assert!(e["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn invalid_value_is_rejected() {
    let e = error_json(&thubert(&["--set", "gan.steps=many", "config"]));
    assert!(e["message"].as_str().unwrap().contains("gan.steps") || e["message"].as_str().unwrap().contains("steps"));
}

#[test]
fn config_round_trips_through_the_cli() {
    let dir = TempDir::new().unwrap();
    let text = ok(&["--set", "gan.steps=77", "--set", "pretrain.mask.span=3", "--seed", "9", "config"]);
    let f = dir.path().join("run.cfg");
    std::fs::write(&f, &text).unwrap();
    assert_eq!(ok(&["--config", &f.display().to_string(), "config"]), text);

    let mut cfg = RunConfig::default();
    cfg.apply_kv_text(&text, "run.cfg").unwrap();
    assert_eq!(cfg.gan.steps, 77);
    assert_eq!(cfg.pretrain.mask.span, 3);
    assert_eq!(cfg.gan.seed, 9);
    let mut again = RunConfig::default();
    again.apply_kv_text(&cfg.to_kv_string(), "x").unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn dry_run_has_no_side_effects() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("corpus");
    let plan = ok(&["--dry-run", "synth-data", "--out", &out.display().to_string()]);
    assert!(plan.contains("plan: synth-data"));
    assert!(!out.exists());

    let feats = corpus(dir.path());
    let km = dir.path().join("km");
    ok(&["--dry-run", "kmeans", "fit", "--feats", &feats, "--k", "4", "--out", &km.display().to_string()]);
    assert!(!km.exists());
}

#[test]
fn missing_input_is_a_structured_error() {
    let o = thubert(&["kmeans", "fit", "--feats", "/nonexistent/feats.tsv", "--k", "3", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_json(&o);
    assert_eq!(e["error"], "missing_input");
    assert!(e["message"].as_str().unwrap().contains("/nonexistent/feats.tsv"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_thubert")).arg("config").env("THBT_THREADS", "zero").output().unwrap();
    assert!(!o.status.success());
    error_json(&o);
}

#[test]
fn finetune_decode_score_chain() {
    let dir = TempDir::new().unwrap();
    let feats = corpus(dir.path());
    let p = |n: &str| dir.path().join(n).display().to_string();
    ok(&["kmeans", "fit", "--feats", &feats, "--k", "6", "--out", &p("km")]);
    ok(&["kmeans", "assign", "--codebook", &p("km/codebook.kmns"), "--feats", &feats, "--out", &p("km")]);
    let small = ["--set", "pretrain.use_layer_k=false", "--set", "pretrain.steps=3", "--set", "pretrain.vocab_l=6", "--set", "finetune.steps=3"];
    let with = |a: &[&str]| -> Vec<String> { a.iter().chain(&small).map(|s| s.to_string()).collect() };
    let run = |a: Vec<String>| ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    run(with(&["pretrain", "--feats", &feats, "--kmeans-codes", &p("km/codes.txt"), "--out", &p("pre")]));
    run(with(&[
        "finetune", "--checkpoint", &p("pre/pretrain.thbt"), "--feats", &feats, "--labels", &p("corpus/speech.tsv"),
        "--phones", &p("corpus/phones.txt"), "--out", &p("ft"),
    ]));
    ok(&["decode", "--model", &p("ft/ctc.thbt"), "--feats", &feats, "--beam", "4", "--out", &p("dec")]);
    let hyp = std::fs::read_to_string(dir.path().join("dec/hyp.tsv")).unwrap();
    assert_eq!(hyp.lines().count(), std::fs::read_to_string(&feats).unwrap().lines().count());
    let per: f64 = ok(&["score", "--hyp", &p("dec/hyp.tsv"), "--ref", &p("corpus/speech.tsv")]).trim().parse().unwrap();
    assert!(per.is_finite() && per >= 0.0);
    let table = ok(&["score", "--hyp", &p("dec/hyp.tsv"), "--ref", &p("corpus/speech.tsv"), "--tsv"]);
    assert!(table.lines().last().unwrap().starts_with("TOTAL"));
}
