use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thubert::encoder::{mask_indices, sample_mask, EncoderConfig, EncoderData, Frontend, MaskSpec, TransformerConfig};
use thubert::kmeans::CodeSequence;
use thubert::pretrain::{
    align_targets, masked_prediction_loss, pretrain, recluster_from_layer, utterance_loss, PredictionHead,
    PretrainConfig, PretrainModel, PretrainUtterance, Stream,
};
use thubert::rng::seeded;
use thubert::tensor::{finite_diff_check, finite_diff_check_params};
use thubert::{Error, FeatureMatrix, Graph, ParamStore, Tensor};

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy_config(layers: usize) -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig {
            frontend: Frontend::Features { dim: 6 },
            transformer: TransformerConfig {
                layers,
                dim: 8,
                ffn_dim: 16,
                heads: 2,
                ..TransformerConfig::default()
            },
        },
        layer_k: 1,
        layer_l: layers,
        vocab_k: 3,
        vocab_l: 5,
        embed_dim: 6,
        ..PretrainConfig::default()
    }
}

fn toy_corpus(n: usize, t: usize, seed: u64) -> Vec<PretrainUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = random_matrix(5, 6, &mut ChaCha8Rng::seed_from_u64(99));
    (0..n)
        .map(|i| {
            let id = format!("u{i}");
            // Runs of six frames share a class; features are the class prototype plus noise,
            // so masked frames are predictable from their neighbours.
            let classes: Vec<usize> = (0..t.div_ceil(6)).map(|_| rng.random_range(0..5)).collect();
            let km: Vec<usize> = (0..t).map(|r| classes[r / 6]).collect();
            let data = km
                .iter()
                .flat_map(|&c| prototypes.row(c).to_vec())
                .map(|v| v + rng.random_range(-0.1..0.1))
                .collect();
            let f = Tensor::new(vec![t, 6], data).unwrap();
            let gan: Vec<usize> = km.iter().map(|&c| c % 3).collect();
            PretrainUtterance {
                id: id.clone(),
                data: EncoderData::Features(FeatureMatrix::new(f, 20, id.clone()).unwrap()),
                kmeans: CodeSequence { codes: km, vocab_size: 5, id: id.clone() },
                gan: Some(CodeSequence { codes: gan, vocab_size: 3, id }),
            }
        })
        .collect()
}

fn head(store: &mut ParamStore, vocab: usize) -> PredictionHead {
    PredictionHead::new(store, "h", 4, 4, vocab, 0.1, &mut seeded(0)).unwrap()
}

#[test]
fn identical_embeddings_give_uniform_probabilities() {
    let mut store = ParamStore::new();
    let h = head(&mut store, 5);
    *store.get_mut(h.emb) = Tensor::new(vec![5, 4], [0.3, -1.0, 2.0, 0.5].repeat(5)).unwrap();
    let mut g = Graph::new(0);
    let o = g.constant(random_matrix(7, 4, &mut ChaCha8Rng::seed_from_u64(1)));
    let logits = h.code_logits(&mut g, &store, o).unwrap();
    let p = g.softmax(logits);
    assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn parallel_embedding_closed_form() {
    let mut store = ParamStore::new();
    let h = head(&mut store, 4);
    let eye = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    *store.get_mut(h.proj.w) = eye.clone();
    *store.get_mut(h.emb) = eye;
    let mut g = Graph::new(0);
    let o = g.constant(Tensor::matrix(1, 4, vec![2.5, 0.0, 0.0, 0.0]).unwrap());
    let logits = h.code_logits(&mut g, &store, o).unwrap();
    let p = g.softmax(logits);
    let e10 = 10f64.exp();
    assert!((g.value(p).data()[0] - e10 / (e10 + 3.0)).abs() < 1e-12);
}

#[test]
fn code_logits_gradients() {
    for seed in 0..10 {
        let mut store = ParamStore::new();
        let h = PredictionHead::new(&mut store, "h", 4, 3, 5, 0.1, &mut seeded(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = random_matrix(3, 4, &mut rng);
        let pick: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        let loss = |g: &mut Graph, s: &ParamStore, x| -> thubert::Result<_> {
            let l = h.code_logits(g, s, x)?;
            g.cross_entropy(l, &pick, thubert::tensor::Reduction::Sum)
        };
        let err = finite_diff_check_params(&store, |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(o.clone());
            loss(g, s, x)
        }, 1e-5, 100)
        .unwrap();
        assert!(err < 1e-4, "params {err}");
        let err = finite_diff_check(|g: &mut Graph, x| loss(g, &store, x), &o, 1e-5).unwrap();
        assert!(err < 1e-4, "input {err}");
    }
}

#[test]
fn probabilities_invariant_to_positive_rescaling() {
    let mut store = ParamStore::new();
    let h = head(&mut store, 6);
    let o = random_matrix(5, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let probs = |store: &ParamStore, o: &Tensor| {
        let mut g = Graph::new(0);
        let x = g.constant(o.clone());
        let l = h.code_logits(&mut g, store, x).unwrap();
        let p = g.softmax(l);
        g.value(p).clone()
    };
    let base = probs(&store, &o);
    for r in 0..5 {
        let s: f64 = base.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let mut scaled = store.clone();
    let emb = scaled.get_mut(h.emb);
    for c in 0..6 {
        for v in emb.row_mut(c) {
            *v *= 0.5 + c as f64;
        }
    }
    assert!(base.max_abs_diff(&probs(&scaled, &o)) < 1e-9);
    let o3 = o.map(|v| v * 3.0);
    assert!(base.max_abs_diff(&probs(&store, &o3)) < 1e-9);
}

fn run_loss(model: &PretrainModel, cfg: &PretrainConfig, u: &PretrainUtterance, mask: &[bool]) -> f64 {
    let mut g = Graph::new(0);
    let v = utterance_loss(
        &mut g,
        &model.store,
        model,
        cfg,
        &u.data,
        &u.kmeans.codes,
        u.gan.as_ref().map(|c| &c.codes[..]),
        mask,
    )
    .unwrap();
    g.value(v).item()
}

#[test]
fn empty_mask_gives_zero_loss() {
    let cfg = toy_config(2);
    let model = PretrainModel::new(&cfg).unwrap();
    let u = &toy_corpus(1, 12, 0)[0];
    assert_eq!(run_loss(&model, &cfg, u, &[false; 12]), 0.0);
}

#[test]
fn identical_embeddings_give_log_vocab_sum() {
    let cfg = toy_config(2);
    let mut model = PretrainModel::new(&cfg).unwrap();
    for h in [model.head_k.clone().unwrap(), model.head_l.clone()] {
        let e = model.store.get_mut(h.emb);
        let row = e.row(0).to_vec();
        for c in 0..h.vocab {
            e.row_mut(c).copy_from_slice(&row);
        }
    }
    let u = &toy_corpus(1, 20, 1)[0];
    let mask = sample_mask(20, &MaskSpec { start_prob: 0.2, span: 3 }, &mut seeded(2));
    let m = mask.iter().filter(|&&x| x).count() as f64;
    assert!(m > 0.0);
    let want = m * (3f64.ln() + 5f64.ln());
    assert!((run_loss(&model, &cfg, u, &mask) - want).abs() < 1e-10);
}

#[test]
fn loss_matches_per_term_oracle() {
    let cfg = toy_config(2);
    let model = PretrainModel::new(&cfg).unwrap();
    let u = &toy_corpus(1, 15, 2)[0];
    let mask = sample_mask(15, &MaskSpec { start_prob: 0.3, span: 2 }, &mut seeded(5));
    let mut g = Graph::new(0);
    let out = model.encoder.forward(&mut g, &model.store, u.data.as_input(), Some(&mask), false).unwrap();
    let mut oracle = 0.0;
    let streams = [
        (cfg.layer_k, model.head_k.as_ref().unwrap(), &u.gan.as_ref().unwrap().codes),
        (cfg.layer_l, &model.head_l, &u.kmeans.codes),
    ];
    for (layer, head, codes) in streams {
        let o = out.hidden[layer];
        let logits = head.code_logits(&mut g, &model.store, o).unwrap();
        let lv = g.value(logits).clone();
        for t in mask_indices(&mask) {
            let row = lv.row(t);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[codes[t]];
        }
    }
    assert!((run_loss(&model, &cfg, u, &mask) - oracle).abs() < 1e-10);
}

#[test]
fn unmasked_targets_do_not_matter() {
    let cfg = toy_config(2);
    let model = PretrainModel::new(&cfg).unwrap();
    let u = toy_corpus(1, 25, 3).remove(0);
    let mask = sample_mask(25, &MaskSpec { start_prob: 0.15, span: 4 }, &mut seeded(8));
    let base = run_loss(&model, &cfg, &u, &mask);
    let mut v = u.clone();
    for t in 0..25 {
        if !mask[t] {
            v.kmeans.codes[t] = (v.kmeans.codes[t] + 1) % 5;
            v.gan.as_mut().unwrap().codes[t] = (v.gan.as_ref().unwrap().codes[t] + 2) % 3;
        }
    }
    assert_eq!(base.to_bits(), run_loss(&model, &cfg, &v, &mask).to_bits());
}

#[test]
fn target_length_mismatch_is_error() {
    let mut store = ParamStore::new();
    let h = head(&mut store, 3);
    let mut g = Graph::new(0);
    let o = g.constant(Tensor::zeros(&[4, 4]));
    let s = Stream { layer: 0, head: &h, targets: &[0, 1, 2] };
    assert!(masked_prediction_loss(&mut g, &store, &[o], &[s], &[0]).is_err());
}

#[test]
fn align_targets_examples() {
    let codes = |n: usize| CodeSequence { codes: (0..n).collect(), vocab_size: 100, id: "utt7".into() };
    assert_eq!(align_targets(&codes(49), 49, 3).unwrap().codes.len(), 49);
    let a = align_targets(&codes(50), 49, 3).unwrap();
    assert_eq!(a.codes, (0..49).collect::<Vec<_>>());
    match align_targets(&codes(55), 49, 3) {
        Err(Error::Utterance { utt, .. }) => assert_eq!(utt, "utt7"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn full_objective_gradient_two_layer_model() {
    for seed in 0..10 {
        let mut cfg = toy_config(2);
        cfg.seed = seed;
        let model = PretrainModel::new(&cfg).unwrap();
        let u = &toy_corpus(1, 8, seed)[0];
        let mut mask = sample_mask(8, &MaskSpec { start_prob: 0.3, span: 2 }, &mut seeded(seed));
        mask[3] = true;
        let err = finite_diff_check_params(
            &model.store,
            |g: &mut Graph, s: &ParamStore| {
                utterance_loss(g, s, &model, &cfg, &u.data, &u.kmeans.codes, Some(&u.gan.as_ref().unwrap().codes), &mask)
            },
            1e-5,
            12,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn zero_steps_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.thbt");
    let mut cfg = toy_config(2);
    cfg.steps = 0;
    let (model, log) = pretrain(&cfg, &toy_corpus(2, 10, 0), Some(&path), |_| {}).unwrap();
    assert!(log.is_empty());
    let fresh = PretrainModel::new(&cfg).unwrap();
    assert_eq!(model.store, fresh.store);
    let (loaded, lcfg, step) = PretrainModel::load(&path).unwrap();
    assert_eq!(loaded.store, model.store);
    assert_eq!((lcfg, step), (cfg, 0));
}

#[test]
fn overfits_single_batch() {
    let mut cfg = toy_config(2);
    cfg.steps = 300;
    cfg.batch_size = 2;
    cfg.peak_lr = 5e-3;
    cfg.weight_decay = 0.0;
    cfg.mask = MaskSpec { start_prob: 0.2, span: 3 };
    let corpus = toy_corpus(2, 30, 4);
    let (_, log) = pretrain(&cfg, &corpus, None, |_| {}).unwrap();
    let first = log[0].loss_total;
    let tail: f64 = log[log.len() - 20..].iter().map(|e| e.loss_total).sum::<f64>() / 20.0;
    assert!(tail <= 0.2 * first, "first {first}, final {tail}");
}

#[test]
fn disabling_layer_k_zeroes_its_component() {
    let mut cfg = toy_config(2);
    cfg.use_layer_k = false;
    cfg.steps = 5;
    let mut corpus = toy_corpus(3, 12, 5);
    for u in &mut corpus {
        u.gan = None;
    }
    let (model, log) = pretrain(&cfg, &corpus, None, |_| {}).unwrap();
    assert!(model.head_k.is_none());
    for e in &log {
        assert_eq!(e.loss_layer_k, 0.0);
        assert!(e.loss_layer_l > 0.0);
        assert!((e.loss_total - e.loss_layer_l).abs() < 1e-12);
    }
    let line = serde_json::to_string(&log[0]).unwrap();
    for key in ["step", "lr", "loss_total", "loss_layer_k", "loss_layer_L", "mask_fraction"] {
        assert!(line.contains(&format!("\"{key}\"")), "{line}");
    }
}

#[test]
fn training_is_deterministic() {
    let mut cfg = toy_config(2);
    cfg.steps = 8;
    cfg.crop_frames = 10;
    let corpus = toy_corpus(3, 16, 6);
    let (a, la) = pretrain(&cfg, &corpus, None, |_| {}).unwrap();
    let (b, lb) = pretrain(&cfg, &corpus, None, |_| {}).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.store, b.store);
}

#[test]
fn non_finite_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.thbt");
    let mut cfg = toy_config(2);
    cfg.steps = 4;
    cfg.peak_lr = f64::NAN;
    cfg.checkpoint_every = 1;
    let err = pretrain(&cfg, &toy_corpus(2, 10, 7), Some(&path), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let (loaded, _, step) = PretrainModel::load(&path).unwrap();
    assert_eq!(step, 0);
    assert!(loaded.store.ids().all(|id| loaded.store.get(id).all_finite()));
}

#[test]
fn recluster_k1_mean_and_determinism() {
    let cfg = toy_config(2);
    let model = PretrainModel::new(&cfg).unwrap();
    let data: Vec<EncoderData> = toy_corpus(3, 9, 8).into_iter().map(|u| u.data).collect();
    let cb = recluster_from_layer(&model.encoder, &model.store, 1, &data, 1, 0).unwrap();
    assert_eq!(cb.source, "layer:1");
    let mut mean = vec![0.0; 8];
    for d in &data {
        let f = model.encoder.layer_features(&model.store, d.as_input(), 1, "x").unwrap();
        for t in 0..f.num_frames() {
            for (m, v) in mean.iter_mut().zip(f.row(t)) {
                *m += v / 27.0;
            }
        }
    }
    for (a, b) in cb.centroids.row(0).iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
    let k3a = recluster_from_layer(&model.encoder, &model.store, 2, &data, 3, 4).unwrap();
    let k3b = recluster_from_layer(&model.encoder, &model.store, 2, &data, 3, 4).unwrap();
    assert_eq!(k3a, k3b);
    assert!(recluster_from_layer(&model.encoder, &model.store, 3, &data, 1, 0).is_err());
}
