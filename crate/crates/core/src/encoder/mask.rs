use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    /// Probability that a frame starts a masked span.
    pub start_prob: f64,
    pub span: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            start_prob: 0.08,
            span: 10,
        }
    }
}

/// Draws span starts independently per frame and marks `[t, t + span)` clipped to `T`.
pub fn sample_mask<R: Rng>(t: usize, spec: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; t];
    for start in 0..t {
        if rng.random::<f64>() < spec.start_prob {
            for m in &mut mask[start..(start + spec.span).min(t)] {
                *m = true;
            }
        }
    }
    mask
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}
