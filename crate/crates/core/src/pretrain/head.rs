use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Reduction, Tensor, Var};

/// Added to vector norms before cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// Projection `W` plus one embedding per code; logits are cosine similarities over `τ`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub proj: Linear,
    /// `[vocab, embed_dim]`.
    pub emb: ParamId,
    pub tau: f64,
    pub vocab: usize,
}

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore<f64>,
        name: &str,
        dim: usize,
        embed_dim: usize,
        vocab: usize,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::invalid("prediction head", format!("temperature must be positive, got {tau}")));
        }
        if vocab == 0 {
            return Err(Error::invalid("prediction head", "empty code vocabulary"));
        }
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), dim, embed_dim, false, rng),
            emb: store.normal(format!("{name}.emb"), &[vocab, embed_dim], 1.0, rng),
            tau,
            vocab,
        })
    }

    /// `T × vocab` scaled cosine similarities between `W·o_t` and each code embedding.
    pub fn code_logits(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, o: Var) -> Result<Var> {
        let z = self.proj.forward(g, store, o)?;
        let z = g.normalize_rows(z, NORM_EPS)?;
        let e = g.param(store, self.emb);
        let e = g.normalize_rows(e, NORM_EPS)?;
        let et = g.transpose(e)?;
        let s = g.matmul(z, et)?;
        Ok(g.scale(s, 1.0 / self.tau))
    }
}

/// One supervised layer: its head and the per-frame targets of the current utterance.
#[derive(Clone, Copy)]
pub struct Stream<'a> {
    pub layer: usize,
    pub head: &'a PredictionHead,
    pub targets: &'a [usize],
}

/// Negative log-likelihood of the targets at masked frames, summed over frames and streams.
///
/// Returns the total and the per-stream components. Only rows in `masked` are projected, so
/// targets at other frames never enter the computation.
pub fn masked_prediction_loss(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    hidden: &[Var],
    streams: &[Stream<'_>],
    masked: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let mut parts = Vec::with_capacity(streams.len());
    for s in streams {
        let o = *hidden.get(s.layer).ok_or_else(|| {
            Error::invalid("masked_prediction_loss", format!("layer {} out of range ({} hidden states)", s.layer, hidden.len()))
        })?;
        let t = g.shape(o)[0];
        if s.targets.len() != t {
            return Err(Error::invalid(
                "masked_prediction_loss",
                format!("{} targets for {t} frames at layer {}", s.targets.len(), s.layer),
            ));
        }
        if let Some(&bad) = masked.iter().find(|&&m| m >= t) {
            return Err(Error::invalid("masked_prediction_loss", format!("masked index {bad} ≥ T={t}")));
        }
        if masked.is_empty() {
            parts.push(g.constant(Tensor::scalar(0.0)));
            continue;
        }
        let rows = g.gather_rows(o, masked)?;
        let logits = s.head.code_logits(g, store, rows)?;
        let targets: Vec<usize> = masked.iter().map(|&m| s.targets[m]).collect();
        parts.push(g.cross_entropy(logits, &targets, Reduction::Sum)?);
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &p in parts.iter().skip(1) {
        total = g.add(total, p)?;
    }
    Ok((total, parts))
}
