use std::collections::HashMap;

use super::ctc_loss;
use crate::real::{log_add_exp, Real};
use crate::tensor::Tensor;

/// Per-frame argmax (ties to the lowest index), repeats collapsed, blanks removed.
pub fn ctc_greedy_decode<S: Real>(log_probs: &Tensor<S>, blank: usize) -> Vec<usize> {
    let best: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut b = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[b] {
                    b = k;
                }
            }
            b
        })
        .collect();
    collapse_path(&best, blank)
}

/// Collapses repeats, then drops blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Prefix beam search without a language model.
///
/// The surviving prefixes are rescored with the exact forward algorithm; returns the best one
/// and its log-probability. Ties between equal scores go to the lexicographically smaller prefix.
pub fn ctc_beam_decode<S: Real>(log_probs: &Tensor<S>, blank: usize, beam_width: usize) -> (Vec<usize>, f64) {
    let width = beam_width.max(1);
    let v = log_probs.cols();
    let ninf = f64::NEG_INFINITY;
    // prefix -> (log p ending in blank, log p ending in non-blank)
    let mut beams: Vec<(Vec<usize>, (f64, f64))> = vec![(Vec::new(), (0.0, ninf))];
    for t in 0..log_probs.rows() {
        let row: Vec<f64> = log_probs.row(t).iter().map(|x| x.as_f64()).collect();
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, (pb, pnb)) in &beams {
            let total = log_add_exp(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = log_add_exp(e.0, total + row[blank]);
            if let Some(&last) = prefix.last() {
                e.1 = log_add_exp(e.1, pnb + row[last]);
            }
            for (k, &lp) in row.iter().enumerate().take(v) {
                if k == blank {
                    continue;
                }
                let mut ext = prefix.clone();
                ext.push(k);
                let add = if prefix.last() == Some(&k) { pb + lp } else { total + lp };
                let e = next.entry(ext).or_insert((ninf, ninf));
                e.1 = log_add_exp(e.1, add);
            }
        }
        let mut all: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        sort_beams(&mut all);
        all.truncate(width);
        beams = all;
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (prefix, _) in beams {
        let score = exact_log_prob(log_probs, &prefix, blank);
        let better = match &best {
            None => true,
            Some((bp, bs)) => score > *bs || (score == *bs && prefix < *bp),
        };
        if better {
            best = Some((prefix, score));
        }
    }
    best.expect("beam is never empty")
}

fn exact_log_prob<S: Real>(log_probs: &Tensor<S>, prefix: &[usize], blank: usize) -> f64 {
    if prefix.is_empty() {
        return (0..log_probs.rows()).map(|t| log_probs.row(t)[blank].as_f64()).sum();
    }
    match ctc_loss(log_probs, prefix, blank) {
        Ok((nll, _)) => -nll.as_f64(),
        Err(_) => f64::NEG_INFINITY,
    }
}

fn sort_beams(b: &mut [(Vec<usize>, (f64, f64))]) {
    b.sort_by(|x, y| {
        let sx = log_add_exp(x.1 .0, x.1 .1);
        let sy = log_add_exp(y.1 .0, y.1 .1);
        sy.total_cmp(&sx).then_with(|| x.0.cmp(&y.0))
    });
}
