use crate::error::{Error, Result};

/// Whether rates are computed over whitespace-separated tokens or single characters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenLevel {
    Word,
    Char,
}

pub fn tokenize(s: &str, level: TokenLevel) -> Vec<String> {
    match level {
        TokenLevel::Word => s.split_whitespace().map(str::to_string).collect(),
        TokenLevel::Char => s.chars().map(String::from).collect(),
    }
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by the reference length; may exceed 1.
pub fn error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("error_rate", "empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level rate: total edits over total reference tokens.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let refs: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if refs == 0 {
        return Err(Error::invalid("error_rate", "empty reference"));
    }
    let edits: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
    Ok(edits as f64 / refs as f64)
}
