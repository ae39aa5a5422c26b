use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thubert::text::{
    load_lexicon, phoneme_histogram, phonemize, phonemize_corpus, read_phoneme_corpus, write_phoneme_corpus, Lexicon,
    PhonemeVocab,
};
use thubert::Error;

fn cat_lexicon(vocab: &PhonemeVocab) -> Lexicon {
    Lexicon::parse("cat K AE T\ndog D AO G\n", vocab, "inline").unwrap()
}

#[test]
fn english_vocab_has_41_symbols() {
    let v = PhonemeVocab::english();
    assert_eq!(v.len(), 41);
    assert_eq!(v.symbol(v.sil_index()), Some("SIL"));
    assert_eq!(PhonemeVocab::synthetic(8).len(), 9);
}

#[test]
fn lexicon_lookup_and_empty_file() {
    let v = PhonemeVocab::english();
    let lex = cat_lexicon(&v);
    let want: Vec<usize> = ["K", "AE", "T"].iter().map(|s| v.index_of(s).unwrap()).collect();
    assert_eq!(lex.get("cat"), Some(&want[..]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.lex");
    std::fs::write(&path, "").unwrap();
    assert!(load_lexicon(&path, &v).unwrap().is_empty());
}

#[test]
fn lexicon_unknown_symbol_reports_line() {
    let v = PhonemeVocab::english();
    let err = Lexicon::parse("cat K AE T\nzed ZZ EH D\n", &v, "lex.txt").unwrap_err();
    match &err {
        Error::Parse { line, msg, .. } => {
            assert_eq!(*line, 2);
            assert!(msg.contains("ZZ"));
        }
        other => panic!("{other:?}"),
    }
    assert!(Lexicon::parse("lonely\n", &v, "lex.txt").is_err());
}

#[test]
fn lexicon_duplicate_first_wins() {
    let v = PhonemeVocab::english();
    let lex = Lexicon::parse("cat K AE T\ncat D AO G\n", &v, "inline").unwrap();
    assert_eq!(lex.get("cat").unwrap()[0], v.index_of("K").unwrap());
    assert_eq!(lex.duplicates, vec![(2, "cat".to_string())]);
}

#[test]
fn phonemize_examples() {
    let v = PhonemeVocab::english();
    let lex = cat_lexicon(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = |s: &str| v.index_of(s).unwrap();
    let (sil, k, ae, t) = (idx("SIL"), idx("K"), idx("AE"), idx("T"));
    assert_eq!(phonemize("cat", &lex, &v, 0.0, &mut rng), Some(vec![sil, k, ae, t, sil]));
    assert_eq!(phonemize("", &lex, &v, 0.5, &mut rng), Some(vec![sil]));
    assert_eq!(
        phonemize("cat cat", &lex, &v, 1.0, &mut rng),
        Some(vec![sil, k, ae, t, sil, k, ae, t, sil])
    );
    assert_eq!(phonemize("cat cat", &lex, &v, 0.0, &mut rng), Some(vec![sil, k, ae, t, k, ae, t, sil]));
    assert_eq!(phonemize("cat mouse", &lex, &v, 0.0, &mut rng), None);
}

#[test]
fn corpus_skips_oov_and_normalizes() {
    let v = PhonemeVocab::english();
    let lex = cat_lexicon(&v);
    let sentences = vec!["Cat, dog!".to_string(), "cat mouse".to_string(), "dog".to_string()];
    let (kept, skipped) = phonemize_corpus(&sentences, &lex, &v, 0.25, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!((kept.len(), skipped), (2, 1));
}

#[test]
fn histogram_examples() {
    assert_eq!(phoneme_histogram(&[vec![0, 0]], 3).unwrap(), vec![1.0, 0.0, 0.0]);
    assert_eq!(phoneme_histogram(&[vec![0], vec![1]], 3).unwrap(), vec![0.5, 0.5, 0.0]);
    assert!(phoneme_histogram(&[], 3).is_err());
    assert!(phoneme_histogram(&[vec![]], 3).is_err());
    assert!(phoneme_histogram(&[vec![3]], 3).is_err());
}

#[test]
fn histogram_matches_sampling_distribution() {
    let probs = [0.4, 0.3, 0.2, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let corpus: Vec<Vec<usize>> = (0..200)
        .map(|_| {
            (0..50)
                .map(|_| {
                    let mut r = rng.random::<f64>();
                    probs.iter().position(|&p| {
                        r -= p;
                        r < 0.0
                    })
                    .unwrap_or(3)
                })
                .collect()
        })
        .collect();
    let n = 200.0 * 50.0;
    let h = phoneme_histogram(&corpus, 4).unwrap();
    for (p, q) in probs.iter().zip(&h) {
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((p - q).abs() <= 3.0 * sigma, "{p} vs {q}");
    }
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let corpus = vec![vec![8, 1, 2, 8], vec![8]];
    write_phoneme_corpus(&path, &corpus).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "8 1 2 8\n8\n");
    assert_eq!(read_phoneme_corpus(&path).unwrap(), corpus);
}

proptest! {
    #[test]
    fn phonemize_bounded_by_silence_and_deterministic(words in proptest::collection::vec(0usize..2, 0..12), p in 0.0f64..1.0, seed in 0u64..1000) {
        let v = PhonemeVocab::english();
        let lex = cat_lexicon(&v);
        let s: Vec<&str> = words.iter().map(|&w| ["cat", "dog"][w]).collect();
        let s = s.join(" ");
        let a = phonemize(&s, &lex, &v, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = phonemize(&s, &lex, &v, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a[0], v.sil_index());
        prop_assert_eq!(*a.last().unwrap(), v.sil_index());
        prop_assert!(a.iter().all(|&i| i < v.len()));
        let hist = phoneme_histogram(&[a], v.len()).unwrap();
        prop_assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
