//! The five terms of the GAN objective, plus a registry so variants can be swapped in.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Reduction, Tensor, Var};

/// Which player's side of the adversarial loss to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Discriminator,
    Generator,
}

pub type GanLossFn = fn(&mut Graph<f64>, &[Var], &[Var], Role) -> Result<Var>;
pub type GpLossFn = fn(&mut Graph<f64>, &mut dyn FnMut(&mut Graph<f64>, Var) -> Result<Var>, &[(Tensor<f64>, Tensor<f64>)], &[f64]) -> Result<Var>;
pub type SpLossFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
pub type PdLossFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
pub type SsLossFn = fn(&mut Graph<f64>, &[Var], &[&[usize]]) -> Result<Var>;

#[derive(Clone, Copy, Debug)]
pub struct LossRegistry {
    pub gan: GanLossFn,
    pub gp: GpLossFn,
    pub sp: SpLossFn,
    pub pd: PdLossFn,
    pub ss: SsLossFn,
}

impl Default for LossRegistry {
    fn default() -> Self {
        Self { gan: loss_gan, gp: loss_gp, sp: loss_sp_batch, pd: loss_pd, ss: loss_ss_batch }
    }
}

fn mean_of(g: &mut Graph<f64>, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::invalid("gan loss", "empty batch"));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Standard non-saturating GAN loss on raw critic scores.
///
/// Discriminator: `mean softplus(-C(real)) + mean softplus(C(fake))`.
/// Generator: `mean softplus(-C(fake))`.
pub fn loss_gan(g: &mut Graph<f64>, real: &[Var], fake: &[Var], role: Role) -> Result<Var> {
    let f: Vec<Var> = match role {
        Role::Discriminator => fake.iter().map(|&s| g.softplus(s)).collect(),
        Role::Generator => fake
            .iter()
            .map(|&s| {
                let n = g.scale(s, -1.0);
                g.softplus(n)
            })
            .collect(),
    };
    let fake_term = mean_of(g, &f)?;
    if role == Role::Generator {
        return Ok(fake_term);
    }
    let r: Vec<Var> = real
        .iter()
        .map(|&s| {
            let n = g.scale(s, -1.0);
            g.softplus(n)
        })
        .collect();
    let real_term = mean_of(g, &r)?;
    g.add(real_term, fake_term)
}

/// Gradient penalty `mean_b (‖∇ C(x̃_b)‖₂ − 1)²` at `x̃_b = α_b·real_b + (1 − α_b)·fake_b`.
/// Pairs must share a shape; the gradient is recorded so the penalty can be differentiated
/// with respect to the critic's parameters.
pub fn loss_gp(
    g: &mut Graph<f64>,
    critic: &mut dyn FnMut(&mut Graph<f64>, Var) -> Result<Var>,
    pairs: &[(Tensor<f64>, Tensor<f64>)],
    alphas: &[f64],
) -> Result<Var> {
    if pairs.len() != alphas.len() {
        return Err(Error::invalid("loss_gp", "one alpha per pair"));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for ((real, fake), &a) in pairs.iter().zip(alphas) {
        if real.shape() != fake.shape() {
            return Err(Error::shape("loss_gp", real.shape(), fake.shape()));
        }
        let data = real.data().iter().zip(fake.data()).map(|(&r, &f)| a * r + (1.0 - a) * f).collect();
        let xt = g.leaf(Tensor::new(real.shape().to_vec(), data)?, true);
        let s = critic(g, xt)?;
        let dx = g.grad_graph(s, xt)?;
        let n = g.l2_norm(dx);
        let d = g.add_scalar(n, -1.0);
        terms.push(g.mul(d, d)?);
    }
    mean_of(g, &terms)
}

/// Smoothness `(1/(T−1)) Σ_t ‖p_{t+1} − p_t‖²`, 0 for a single frame.
pub fn loss_sp(g: &mut Graph<f64>, probs: Var) -> Result<Var> {
    let t = g.shape(probs)[0];
    if t < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let next = g.slice_rows(probs, 1, t - 1)?;
    let prev = g.slice_rows(probs, 0, t - 1)?;
    let d = g.sub(next, prev)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (t - 1) as f64))
}

/// Mean of [`loss_sp`] over the utterances of a batch.
pub fn loss_sp_batch(g: &mut Graph<f64>, probs: &[Var]) -> Result<Var> {
    let terms = probs.iter().map(|&p| loss_sp(g, p)).collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// Negative entropy `Σ_v p̄_v ln p̄_v` of the average frame distribution over the batch.
pub fn loss_pd(g: &mut Graph<f64>, probs: &[Var]) -> Result<Var> {
    let nonempty: Vec<Var> = probs.iter().copied().filter(|&p| g.shape(p)[0] > 0).collect();
    if nonempty.is_empty() {
        return Err(Error::invalid("loss_pd", "batch has no frames"));
    }
    let all = g.concat_rows(&nonempty)?;
    let avg = g.mean_rows(all)?;
    let e = g.xlogx(avg);
    Ok(g.sum(e))
}

/// Mean frame-wise cross-entropy between auxiliary logits and k-means codes.
pub fn loss_ss(g: &mut Graph<f64>, aux_logits: Var, codes: &[usize]) -> Result<Var> {
    if g.shape(aux_logits)[0] != codes.len() {
        return Err(Error::invalid(
            "loss_ss",
            format!("{} generator frames but {} codes", g.shape(aux_logits)[0], codes.len()),
        ));
    }
    g.cross_entropy(aux_logits, codes, Reduction::Mean)
}

/// Cross-entropy averaged over every frame of the batch.
pub fn loss_ss_batch(g: &mut Graph<f64>, aux_logits: &[Var], codes: &[&[usize]]) -> Result<Var> {
    if aux_logits.len() != codes.len() {
        return Err(Error::invalid("loss_ss", "one code sequence per utterance"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (&a, &c) in aux_logits.iter().zip(codes) {
        if g.shape(a)[0] != c.len() {
            return Err(Error::invalid("loss_ss", format!("{} generator frames but {} codes", g.shape(a)[0], c.len())));
        }
        if !c.is_empty() {
            rows.push(a);
            targets.extend_from_slice(c);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("loss_ss", "batch has no frames"));
    }
    let all = g.concat_rows(&rows)?;
    g.cross_entropy(all, &targets, Reduction::Mean)
}
