use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thubert::encoder::{
    conv_encoder_forward, output_length, relpos_bucket, sample_mask, ConvEncoderConfig, Encoder, EncoderConfig,
    EncoderInput, Frontend, MaskSpec, TransformerConfig,
};
use thubert::rng::seeded;
use thubert::tensor::finite_diff_check_params;
use thubert::{FeatureMatrix, Graph, ParamStore, Tensor, Waveform};

/// Counts window positions layer by layer, one sample offset at a time.
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

fn tiny_config(layers: usize) -> EncoderConfig {
    EncoderConfig {
        frontend: Frontend::Features { dim: 5 },
        transformer: TransformerConfig {
            layers,
            dim: 8,
            ffn_dim: 12,
            heads: 2,
            ..TransformerConfig::default()
        },
    }
}

fn random_features(t: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), 20, "u")
        .unwrap()
}

#[test]
fn output_length_examples() {
    assert_eq!(output_length(16000).unwrap(), 49);
    assert_eq!(output_length(3200).unwrap(), 9);
    assert_eq!(output_length(400).unwrap(), 1);
    assert!(output_length(399).is_err());
    let cfg = ConvEncoderConfig::paper();
    assert_eq!(cfg.receptive_field(), 400);
    assert_eq!(cfg.hop(), 320);
}

#[test]
fn output_length_matches_simulation() {
    let cfg = ConvEncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let n = rng.random_range(300..40_000);
        assert_eq!(cfg.output_length(n).ok(), simulate_frames(n, &cfg), "n={n}");
    }
}

#[test]
fn mfcc_frames_match_conv_frames_for_one_second() {
    use thubert::audio::{frame_align_20ms, mfcc, MfccConfig};
    let w = Waveform::new(vec![0.01; 16000], 16000).unwrap();
    let f = frame_align_20ms(&mfcc(&w, &MfccConfig::default()).unwrap()).unwrap();
    assert!(f.num_frames().abs_diff(output_length(16000).unwrap()) <= 2);
}

#[test]
fn conv_encoder_zero_input_and_length() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        frontend: Frontend::Waveform(ConvEncoderConfig {
            channels: 6,
            ..ConvEncoderConfig::default()
        }),
        transformer: TransformerConfig {
            layers: 0,
            dim: 4,
            ffn_dim: 4,
            heads: 1,
            ..TransformerConfig::default()
        },
    };
    let enc = Encoder::new(&mut store, cfg, &mut seeded(1)).unwrap();
    // Nonzero biases make the constant output channel-dependent.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            let n = store.get(id).numel();
            *store.get_mut(id) = Tensor::vector((0..n).map(|i| 0.1 * i as f64).collect());
        }
    }
    let zero = conv_encoder_forward(&enc, &store, &Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
    assert_eq!(zero.num_frames(), 49);
    for t in 1..49 {
        assert_eq!(zero.row(t), zero.row(0));
    }
}

#[test]
fn conv_encoder_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        frontend: Frontend::Waveform(ConvEncoderConfig {
            channels: 3,
            ..ConvEncoderConfig::default()
        }),
        transformer: TransformerConfig {
            layers: 0,
            dim: 4,
            ffn_dim: 4,
            heads: 1,
            ..TransformerConfig::default()
        },
    };
    let enc = Encoder::new(&mut store, cfg, &mut seeded(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Waveform::new((0..800).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap();
    // Restrict the check to the first conv block.
    let first = store.find("enc.conv0.w").unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, id == first);
    }
    let err = finite_diff_check_params(
        &store,
        |g: &mut Graph, s: &ParamStore| {
            let x = enc.conv_forward(g, s, &w)?;
            Ok(g.sum(x))
        },
        1e-5,
        30,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn mask_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_mask(50, &MaskSpec { start_prob: 0.0, span: 10 }, &mut rng).iter().all(|&m| !m));
    assert!(sample_mask(50, &MaskSpec { start_prob: 1.0, span: 50 }, &mut rng).iter().all(|&m| m));
}

#[test]
fn mask_coverage_matches_closed_form() {
    let spec = MaskSpec::default();
    let mean: f64 = (0..100)
        .map(|seed| {
            let m = sample_mask(1000, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            m.iter().filter(|&&x| x).count() as f64 / 1000.0
        })
        .sum::<f64>()
        / 100.0;
    let expect = 1.0 - 0.92f64.powi(10);
    assert!((mean - expect).abs() <= 0.05, "{mean} vs {expect}");
}

#[test]
fn masking_leaves_unmasked_frames() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, tiny_config(1), &mut seeded(0)).unwrap();
    let f = random_features(30, 5, 1);
    let mut g = Graph::new(0);
    let x = enc.embed(&mut g, &store, EncoderInput::Features(&f)).unwrap();
    let (y, idx) = enc.sample_and_mask(&mut g, &store, x, &MaskSpec { start_prob: 0.2, span: 3 }, &mut seeded(4)).unwrap();
    assert!(!idx.is_empty());
    let emb = store.get(enc.mask_embedding()).data().to_vec();
    for t in 0..30 {
        let row = g.value(y).row(t);
        if idx.contains(&t) {
            assert_eq!(row, &emb[..]);
        } else {
            assert_eq!(row, g.value(x).row(t));
        }
    }
}

/// T5's bucketing as written in the reference implementation: `n = query − key`.
fn t5_reference(relative_position: i64, num_buckets: usize, max_distance: usize) -> usize {
    let mut ret = 0i64;
    let n = -relative_position;
    let nb = (num_buckets / 2) as i64;
    if n < 0 {
        ret += nb;
    }
    let n = n.abs();
    let max_exact = nb / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let v = max_exact as f64
        + ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()) * (nb - max_exact) as f64;
    (ret + (v as i64).min(nb - 1)) as usize
}

#[test]
fn relpos_examples() {
    assert_eq!(relpos_bucket(0, 32, 128), 0);
    assert_eq!(relpos_bucket(-1, 32, 128), 1);
    assert_eq!(relpos_bucket(1, 32, 128), 17);
    assert_eq!(relpos_bucket(-10000, 32, 128), 15);
    assert_eq!(relpos_bucket(10000, 32, 128), 31);
    for off in -300..=300 {
        assert_eq!(relpos_bucket(off, 32, 128), t5_reference(off, 32, 128), "offset {off}");
    }
}

proptest! {
    #[test]
    fn relpos_monotone_within_half(a in 0i64..5000, b in 0i64..5000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(relpos_bucket(-lo, 32, 128) <= relpos_bucket(-hi, 32, 128));
        if lo > 0 {
            prop_assert!(relpos_bucket(lo, 32, 128) <= relpos_bucket(hi, 32, 128));
        }
        prop_assert!(relpos_bucket(hi, 32, 128) < 32);
    }
}

#[test]
fn zero_layers_returns_input() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, tiny_config(0), &mut seeded(0)).unwrap();
    let f = random_features(7, 5, 2);
    let mut g = Graph::new(0);
    let out = enc.forward(&mut g, &store, EncoderInput::Features(&f), None, false).unwrap();
    assert_eq!(out.hidden.len(), 1);
    assert_eq!(g.shape(out.hidden[0]), &[7, 8]);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, tiny_config(2), &mut seeded(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rp = enc.relpos_param();
    let n = store.get(rp).numel();
    *store.get_mut(rp) = Tensor::new(vec![32, 2], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let f = random_features(11, 5, 3);
    let mut g = Graph::new(0);
    let out = enc.forward(&mut g, &store, EncoderInput::Features(&f), None, false).unwrap();
    assert_eq!(out.hidden.len(), 3);
    for layer in &out.attention {
        for &p in layer {
            for r in 0..11 {
                let s: f64 = g.value(p).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn bias_free_attention_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, tiny_config(1), &mut seeded(7)).unwrap();
    let f = random_features(9, 5, 4);
    let perm = [3usize, 0, 8, 1, 7, 2, 6, 4, 5];
    let rows: Vec<&[f64]> = perm.iter().map(|&p| f.row(p)).collect();
    let fp = FeatureMatrix::new(Tensor::from_rows(&rows, 5).unwrap(), 20, "p").unwrap();
    let run = |f: &FeatureMatrix| {
        let mut g = Graph::new(0);
        let out = enc.forward(&mut g, &store, EncoderInput::Features(f), None, false).unwrap();
        g.value(out.hidden[1]).clone()
    };
    let (a, b) = (run(&f), run(&fp));
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in b.row(i).iter().zip(a.row(p)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_forward_is_deterministic_and_layer_range_checked() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, tiny_config(3), &mut seeded(8)).unwrap();
    let f = random_features(10, 5, 5);
    let a = enc.layer_features(&store, EncoderInput::Features(&f), 2, "u").unwrap();
    let b = enc.layer_features(&store, EncoderInput::Features(&f), 2, "u").unwrap();
    assert_eq!(a, b);
    let mut g = Graph::new(0);
    let out = enc.forward(&mut g, &store, EncoderInput::Features(&f), None, false).unwrap();
    assert_eq!(g.value(out.hidden[2]), &a.frames);
    assert!(enc.layer_features(&store, EncoderInput::Features(&f), 4, "u").is_err());
}

#[test]
fn config_shapes() {
    let p = TransformerConfig::paper();
    assert_eq!((p.layers, p.dim, p.ffn_dim, p.heads, p.head_dim()), (12, 768, 3072, 12, 64));
    let a = TransformerConfig::ablation();
    assert_eq!((a.dim, a.heads, a.ffn_dim), (384, 6, 1536));
    let t = TransformerConfig::default();
    assert_eq!((t.dim, t.heads, t.layers), (192, 4, 6));
    let bad = EncoderConfig {
        transformer: TransformerConfig { dim: 10, heads: 4, ..TransformerConfig::default() },
        ..EncoderConfig::default()
    };
    assert!(Encoder::new(&mut ParamStore::new(), bad, &mut seeded(0)).is_err());
}

#[test]
fn feature_dim_mismatch_is_error() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, tiny_config(1), &mut seeded(0)).unwrap();
    let f = random_features(4, 6, 0);
    let mut g = Graph::new(0);
    assert!(enc.forward(&mut g, &store, EncoderInput::Features(&f), None, false).is_err());
}
