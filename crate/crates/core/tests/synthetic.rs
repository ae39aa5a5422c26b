use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thubert::audio::{frame_align_20ms, load_wav, mfcc, MfccConfig};
use thubert::encoder::output_length;
use thubert::synthetic::{collapse, read_alignments, write_corpus, SynthSpec, Synthesizer};
use thubert::text::phoneme_histogram;

fn synth() -> Synthesizer {
    Synthesizer::new(SynthSpec::default()).unwrap()
}

#[test]
fn noiseless_single_phone_frames() {
    let s = Synthesizer::new(SynthSpec {
        noise_level: 0.0,
        min_phones: 1,
        max_phones: 1,
        min_frames: 5,
        max_frames: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let u = s.gen_utterance("u", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sil = s.sil_index();
    let p = u.labels[5];
    assert_ne!(p, sil);
    assert_eq!(u.labels, [vec![sil; 5], vec![p; 5], vec![sil; 5]].concat());
    assert_eq!(u.transcript, vec![sil, p, sil]);

    let frames = s.render(&[p; 5], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let spf = s.samples_per_frame();
    let energy: Vec<f64> = (0..5).map(|f| frames.samples[f * spf..(f + 1) * spf].iter().map(|x| x * x).sum()).collect();
    for e in &energy {
        assert!((e / energy[0] - 1.0).abs() < 0.25, "{energy:?}");
    }
}

#[test]
fn utterances_are_seed_deterministic() {
    let s = synth();
    let a = s.gen_utterance("u", &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b = s.gen_utterance("u", &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(collapse(&a.labels), a.transcript);
}

#[test]
fn corpus_halves_are_disjoint() {
    let s = synth();
    let c = s.gen_corpus(2, 0).unwrap();
    assert_eq!((c.speech.len(), c.text.len()), (1, 1));
    let c = s.gen_corpus(40, 5).unwrap();
    for (id, _) in &c.text {
        assert!(c.speech.iter().all(|u| &u.id != id));
    }
    assert!(s.gen_corpus(1, 0).is_err());
}

#[test]
fn text_histogram_matches_stationary_distribution() {
    let s = synth();
    let c = s.gen_corpus(800, 77).unwrap();
    let sil = s.sil_index();
    let phones: Vec<Vec<usize>> = c.text.iter().map(|(_, p)| p.iter().copied().filter(|&x| x != sil).collect()).collect();
    let n: usize = phones.iter().map(Vec::len).sum();
    let h = phoneme_histogram(&phones, s.spec.n_phones).unwrap();
    for (p, q) in s.stationary.iter().zip(&h) {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((p - q).abs() <= 3.0 * sigma, "{p} vs {q} (3σ = {})", 3.0 * sigma);
    }
}

#[test]
fn nearest_centroid_mfcc_accuracy() {
    let s = synth();
    let c = s.gen_corpus(120, 1).unwrap();
    let cfg = MfccConfig::default();
    let classes = s.spec.n_phones + 1;
    let feats: Vec<_> = c
        .speech
        .iter()
        .map(|u| frame_align_20ms(&mfcc(&u.waveform, &cfg).unwrap()).unwrap())
        .collect();
    for (f, u) in feats.iter().zip(&c.speech) {
        assert_eq!(f.num_frames(), u.labels.len());
    }
    let (train, test) = feats.split_at(30);
    let mut sums = vec![vec![0.0; 39]; classes];
    let mut counts = vec![0usize; classes];
    for (f, u) in train.iter().zip(&c.speech) {
        for t in 0..f.num_frames() {
            counts[u.labels[t]] += 1;
            for (a, b) in sums[u.labels[t]].iter_mut().zip(f.row(t)) {
                *a += b;
            }
        }
    }
    let centroids: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &n)| s.iter().map(|v| v / n as f64).collect()).collect();
    let (mut right, mut total) = (0, 0);
    for (f, u) in test.iter().zip(&c.speech[30..]) {
        for t in 0..f.num_frames() {
            let d = |k: usize| centroids[k].iter().zip(f.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..classes).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
            right += (best == u.labels[t]) as usize;
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn alignment_length_matches_encoder_geometry() {
    let s = synth();
    for u in s.gen_corpus(20, 3).unwrap().speech {
        let enc = output_length(u.waveform.len()).unwrap();
        assert!(enc.abs_diff(u.labels.len()) <= 1, "{enc} vs {}", u.labels.len());
    }
}

#[test]
fn corpus_files() {
    let s = synth();
    let c = s.gen_corpus(6, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_corpus(dir.path(), &c, &s.vocab()).unwrap();
    let manifest = std::fs::read_to_string(&files.manifest).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(!manifest.contains("SIL"));
    let aligns = read_alignments(&files.alignments).unwrap();
    assert_eq!(aligns[0].1, c.speech[0].labels);
    let w: thubert::Waveform = load_wav(&files.wavs[0]).unwrap();
    assert_eq!(w.len(), c.speech[0].waveform.len());
}
