//! Lexicon-based phonemization of unpaired text.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// ARPAbet monophones without stress, plus spoken noise; silence is appended last.
const DEFAULT_PHONES: [&str; 40] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY",
    "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y",
    "Z", "ZH", "SPN",
];

pub const SIL: &str = "SIL";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    sil_index: usize,
}

impl PhonemeVocab {
    pub fn new(symbols: Vec<String>, sil: &str) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid("phoneme vocab", format!("duplicate symbol {s:?}")));
            }
        }
        let sil_index = *index
            .get(sil)
            .ok_or_else(|| Error::invalid("phoneme vocab", format!("silence symbol {sil:?} missing")))?;
        Ok(Self { symbols, index, sil_index })
    }

    /// The 41-symbol English inventory (40 phones and `SIL`).
    pub fn english() -> Self {
        let mut symbols: Vec<String> = DEFAULT_PHONES.iter().map(|s| s.to_string()).collect();
        symbols.push(SIL.into());
        Self::new(symbols, SIL).expect("default vocab is valid")
    }

    /// `n` synthetic phones named `P0..` followed by `SIL`.
    pub fn synthetic(n: usize) -> Self {
        let mut symbols: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
        symbols.push(SIL.into());
        Self::new(symbols, SIL).expect("synthetic vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn sil_index(&self) -> usize {
        self.sil_index
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, i: usize) -> Option<&str> {
        self.symbols.get(i).map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<usize>>,
    /// `(line, word)` for entries ignored because the word was already defined.
    pub duplicates: Vec<(usize, String)>,
}

impl Lexicon {
    pub fn parse(text: &str, vocab: &PhonemeVocab, origin: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                msg,
            };
            let phones = parts
                .map(|p| vocab.index_of(p).ok_or_else(|| err(format!("unknown phoneme symbol {p:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if phones.is_empty() {
                return Err(err(format!("word {word:?} has no phonemes")));
            }
            let word = word.to_lowercase();
            if lex.entries.contains_key(&word) {
                log::warn!("{origin}:{lineno}: duplicate lexicon entry {word:?} ignored");
                lex.duplicates.push((lineno, word));
            } else {
                lex.entries.insert(word, phones);
            }
        }
        Ok(lex)
    }

    pub fn insert(&mut self, word: &str, phones: Vec<usize>) {
        self.entries.entry(word.to_lowercase()).or_insert(phones);
    }

    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_lexicon(path: &Path, vocab: &PhonemeVocab) -> Result<Lexicon> {
    let text = crate::util::read_to_string(path)?;
    Lexicon::parse(&text, vocab, &path.display().to_string())
}

/// Lowercases and drops everything but letters, apostrophes and whitespace.
pub fn normalize_sentence(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphabetic() || *c == '\'' || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Phoneme indices for a sentence, or `None` if any word is missing from the lexicon.
///
/// Silence always opens and closes the sequence and is inserted between words with
/// probability `p_sil`.
pub fn phonemize<R: Rng>(
    sentence: &str,
    lex: &Lexicon,
    vocab: &PhonemeVocab,
    p_sil: f64,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let sil = vocab.sil_index();
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.is_empty() {
        return Some(vec![sil]);
    }
    let mut out = vec![sil];
    for (i, w) in words.iter().enumerate() {
        out.extend_from_slice(lex.get(w)?);
        if i + 1 < words.len() && rng.random::<f64>() < p_sil {
            out.push(sil);
        }
    }
    out.push(sil);
    Some(out)
}

/// Phonemizes every sentence; returns the kept sequences and the number skipped as OOV.
pub fn phonemize_corpus<R: Rng>(
    sentences: &[String],
    lex: &Lexicon,
    vocab: &PhonemeVocab,
    p_sil: f64,
    rng: &mut R,
) -> (Vec<Vec<usize>>, usize) {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for s in sentences {
        match phonemize(&normalize_sentence(s), lex, vocab, p_sil, rng) {
            Some(p) => kept.push(p),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} sentences with out-of-lexicon words");
    }
    (kept, skipped)
}

pub fn phoneme_histogram(corpus: &[Vec<usize>], vocab_size: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; vocab_size];
    for &p in corpus.iter().flatten() {
        *counts
            .get_mut(p)
            .ok_or_else(|| Error::invalid("phoneme_histogram", format!("index {p} ≥ vocab size {vocab_size}")))? += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("phoneme_histogram", "empty corpus"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

pub fn write_phoneme_corpus(path: &Path, corpus: &[Vec<usize>]) -> Result<()> {
    let mut s = String::new();
    for utt in corpus {
        let line: Vec<String> = utt.iter().map(usize::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    crate::util::write_atomic(path, s.as_bytes())
}

pub fn read_phoneme_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = crate::util::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line: n + 1,
                        msg: format!("bad phoneme index {t:?}"),
                    })
                })
                .collect()
        })
        .collect()
}
