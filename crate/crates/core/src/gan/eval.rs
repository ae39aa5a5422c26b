use super::{argmax, Generator};
use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kmeans::CodeSequence;
use crate::nn::ParamStore;

/// Per-frame argmax of the eval-mode generator over full utterances.
pub fn extract_pseudo_labels(gen: &Generator, store: &ParamStore<f64>, corpus: &[FeatureMatrix<f64>]) -> Result<Vec<CodeSequence>> {
    corpus
        .iter()
        .map(|f| {
            let p = gen.probabilities(store, f)?;
            Ok(CodeSequence {
                codes: (0..p.rows()).map(|t| argmax(p.row(t))).collect(),
                vocab_size: gen.vocab,
                id: f.id.clone(),
            })
        })
        .collect()
}

/// Maps each unit to the reference label it co-occurs with most (ties to the lower label).
pub fn unit_mapping(pairs: &[(&[usize], &[usize])], n_units: usize, n_labels: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_units * n_labels];
    for (units, labels) in pairs {
        if units.len() != labels.len() {
            return Err(Error::invalid("unit_mapping", format!("{} units vs {} labels", units.len(), labels.len())));
        }
        for (&u, &l) in units.iter().zip(labels.iter()) {
            if u >= n_units || l >= n_labels {
                return Err(Error::invalid("unit_mapping", format!("unit {u} or label {l} out of range")));
            }
            counts[u * n_labels + l] += 1;
        }
    }
    Ok((0..n_units)
        .map(|u| {
            let row = &counts[u * n_labels..(u + 1) * n_labels];
            let mut b = 0;
            for (l, &c) in row.iter().enumerate() {
                if c > row[b] {
                    b = l;
                }
            }
            b
        })
        .collect())
}

/// Frame accuracy after the greedy many-to-one unit-to-label mapping.
pub fn mapped_accuracy(pairs: &[(&[usize], &[usize])], n_units: usize, n_labels: usize) -> Result<f64> {
    let map = unit_mapping(pairs, n_units, n_labels)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (units, labels) in pairs {
        for (&u, &l) in units.iter().zip(labels.iter()) {
            hit += usize::from(map[u] == l);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("mapped_accuracy", "no frames"));
    }
    Ok(hit as f64 / total as f64)
}
