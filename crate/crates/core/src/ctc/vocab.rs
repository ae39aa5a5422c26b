use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const BLANK_SYMBOL: &str = "<b>";

/// CTC output symbols with the blank at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    chars: bool,
}

impl CtcVocab {
    /// Blank, space (`|`), apostrophe and `a`–`z`: 29 symbols. Transcripts are read per character.
    pub fn characters() -> Self {
        let mut s = vec![BLANK_SYMBOL.to_string(), "|".into(), "'".into()];
        s.extend(('a'..='z').map(String::from));
        Self::build(s, true).expect("character vocab is valid")
    }

    /// Blank followed by whitespace-separated tokens (e.g. phones).
    pub fn tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut s = vec![BLANK_SYMBOL.to_string()];
        s.extend(tokens);
        Self::build(s, false)
    }

    fn build(symbols: Vec<String>, chars: bool) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains(',') {
                return Err(Error::invalid("ctc vocab", format!("bad symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid("ctc vocab", format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index, chars })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn is_char_level(&self) -> bool {
        self.chars
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Transcript to label indices (no blanks); unknown symbols are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let lookup = |s: &str| {
            self.index
                .get(s)
                .copied()
                .filter(|&i| i != BLANK)
                .ok_or_else(|| Error::invalid("ctc vocab", format!("symbol {s:?} not in vocabulary")))
        };
        if self.chars {
            let words: Vec<&str> = text.split_whitespace().collect();
            let joined = words.join(" ").to_lowercase();
            joined
                .chars()
                .map(|c| if c == ' ' { lookup("|") } else { lookup(&c.to_string()) })
                .collect()
        } else {
            text.split_whitespace().map(lookup).collect()
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let syms = ids.iter().filter(|&&i| i != BLANK).map(|&i| self.symbols.get(i).map_or("?", String::as_str));
        if self.chars {
            syms.map(|s| if s == "|" { " " } else { s }).collect()
        } else {
            syms.collect::<Vec<_>>().join(" ")
        }
    }
}

/// `chars` or `tokens:<a>,<b>,…`.
impl fmt::Display for CtcVocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.chars {
            write!(f, "chars")
        } else {
            write!(f, "tokens:{}", self.symbols[1..].join(","))
        }
    }
}

impl FromStr for CtcVocab {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "chars" {
            return Ok(Self::characters());
        }
        let list = s.strip_prefix("tokens:").ok_or("expected chars or tokens:<list>")?;
        Self::tokens(list.split(',').filter(|t| !t.is_empty()).map(str::to_string)).map_err(|e| e.to_string())
    }
}
