use crate::error::{Error, Result};
use crate::real::{log_add_exp, Real};
use crate::tensor::Tensor;

/// Frames needed to emit `target`: one per label plus a blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities (`T × V`), and its
/// gradient with respect to those log-probabilities.
pub fn ctc_loss<S: Real>(log_probs: &Tensor<S>, target: &[usize], blank: usize) -> Result<(S, Tensor<S>)> {
    if log_probs.rank() != 2 {
        return Err(Error::invalid("ctc_loss", format!("expected T×V log-probs, got {:?}", log_probs.shape())));
    }
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if blank >= v {
        return Err(Error::invalid("ctc_loss", format!("blank {blank} outside vocabulary of {v}")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= v || l == blank) {
        return Err(Error::invalid("ctc_loss", format!("invalid target label {bad}")));
    }
    let need = min_frames(target);
    if t_len < need.max(1) {
        return Err(Error::invalid(
            "ctc_loss",
            format!("{t_len} frames cannot align a target needing {}", need.max(1)),
        ));
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let ninf = S::neg_infinity();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, ext[s]);
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_z = if s_len > 1 { log_add_exp(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if !log_z.is_finite() {
        return Err(Error::NonFinite("ctc_loss: target has zero probability".into()));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                b = log_add_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, ext[s]);
        }
    }

    let mut grad = Tensor::zeros(&[t_len, v]);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let i = t * s_len + s;
            let occ = alpha[i] + beta[i] - lp(t, ext[s]) - log_z;
            if occ.is_finite() {
                row[ext[s]] = row[ext[s]] - occ.exp();
            }
        }
    }
    Ok((-log_z, grad))
}
