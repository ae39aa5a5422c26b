use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::{Conv1dLayer, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{BatchNormMode, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Batch norm over input features, one same-padded convolution to `vocab` logits, and a
/// linear auxiliary head from the output probabilities to `aux_vocab` k-means codes.
#[derive(Clone, Debug)]
pub struct Generator {
    pub input_dim: usize,
    pub vocab: usize,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub conv: Conv1dLayer,
    pub aux: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
    pub aux_logits: Vec<Var>,
    /// Training-mode batch norm node, for running-statistic updates.
    pub bn: Option<Var>,
}

impl Generator {
    pub fn new(store: &mut ParamStore<f64>, input_dim: usize, vocab: usize, kernel: usize, aux_vocab: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || vocab < 2 || kernel == 0 {
            return Err(Error::invalid("generator", "need input_dim > 0, vocab >= 2, kernel > 0"));
        }
        Ok(Self {
            input_dim,
            vocab,
            bn_gamma: store.ones("gen.bn.gamma", &[input_dim]),
            bn_beta: store.zeros("gen.bn.beta", &[input_dim]),
            bn_mean: store.buffer("gen.bn.mean", Tensor::zeros(&[input_dim])),
            bn_var: store.buffer("gen.bn.var", Tensor::ones(&[input_dim])),
            conv: Conv1dLayer::new(store, "gen.conv", input_dim, vocab, kernel, 1, true, true, rng),
            aux: (aux_vocab > 0).then(|| Linear::new(store, "gen.aux", vocab, aux_vocab, true, rng)),
        })
    }

    /// Reconstructs the handles of a generator whose parameters are already in `store`.
    pub fn from_store(store: &ParamStore<f64>) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::Config(format!("generator parameter {n} missing")));
        let w = find("gen.conv.w")?;
        let shape = store.get(w).shape().to_vec();
        let (vocab, input_dim, kernel) = (shape[0], shape[1], shape[2]);
        let conv = Conv1dLayer {
            w,
            b: store.find("gen.conv.b"),
            stride: 1,
            pad_left: (kernel - 1) / 2,
            pad_right: kernel - 1 - (kernel - 1) / 2,
        };
        let aux = store.find("gen.aux.w").map(|w| Linear { w, b: store.find("gen.aux.b") });
        Ok(Self {
            input_dim,
            vocab,
            bn_gamma: find("gen.bn.gamma")?,
            bn_beta: find("gen.bn.beta")?,
            bn_mean: find("gen.bn.mean")?,
            bn_var: find("gen.bn.var")?,
            conv,
            aux,
        })
    }

    pub fn aux_vocab(&self, store: &ParamStore<f64>) -> usize {
        self.aux.map_or(0, |l| store.get(l.w).shape()[1])
    }

    /// Forward over a batch. In training mode the batch norm uses statistics pooled over all
    /// frames of the batch; otherwise the running statistics.
    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, batch: &[&FeatureMatrix<f64>], train: bool) -> Result<GeneratorOutput> {
        for f in batch {
            if f.dim() != self.input_dim {
                return Err(Error::shape("generator input", &[f.num_frames(), f.dim()], &[f.num_frames(), self.input_dim]));
            }
        }
        let mut out = GeneratorOutput { logits: Vec::new(), probs: Vec::new(), aux_logits: Vec::new(), bn: None };
        let lens: Vec<usize> = batch.iter().map(|f| f.num_frames()).collect();
        let total: usize = lens.iter().sum();
        if total == 0 {
            for _ in batch {
                let z = g.constant(Tensor::zeros(&[0, self.vocab]));
                out.logits.push(z);
                out.probs.push(z);
                out.aux_logits.push(z);
            }
            return Ok(out);
        }
        let parts: Vec<Var> = batch.iter().map(|f| g.constant(f.frames.clone())).collect();
        let x = g.concat_rows(&parts)?;
        let gamma = g.param(store, self.bn_gamma);
        let beta = g.param(store, self.bn_beta);
        let mode = if train {
            BatchNormMode::Train { eps: BN_EPS }
        } else {
            BatchNormMode::Eval { mean: store.get(self.bn_mean).data(), var: store.get(self.bn_var).data(), eps: BN_EPS }
        };
        let xn = g.batch_norm(x, gamma, beta, mode)?;
        if train {
            out.bn = Some(xn);
        }
        let mut start = 0;
        for &t in &lens {
            if t == 0 {
                let z = g.constant(Tensor::zeros(&[0, self.vocab]));
                out.logits.push(z);
                out.probs.push(z);
                out.aux_logits.push(z);
                continue;
            }
            let xi = g.slice_rows(xn, start, t)?;
            start += t;
            let logits = self.conv.forward(g, store, xi)?;
            let probs = g.softmax(logits);
            let aux = match self.aux {
                Some(head) => head.forward(g, store, probs)?,
                None => probs,
            };
            out.logits.push(logits);
            out.probs.push(probs);
            out.aux_logits.push(aux);
        }
        Ok(out)
    }

    /// Exponential moving average of the batch statistics recorded by a training forward.
    pub fn update_running_stats(&self, g: &Graph<f64>, out: &GeneratorOutput, store: &mut ParamStore<f64>) {
        let Some((mean, var)) = out.bn.and_then(|v| g.batch_stats(v)) else { return };
        let (mean, var) = (mean.to_vec(), var.to_vec());
        for (r, m) in store.get_mut(self.bn_mean).data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(self.bn_var).data_mut().iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    /// Eval-mode probabilities for one utterance, `T × V`.
    pub fn probabilities(&self, store: &ParamStore<f64>, f: &FeatureMatrix<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new(0);
        let out = self.forward(&mut g, store, &[f], false)?;
        Ok(g.value(out.probs[0]).clone())
    }
}

/// Three same-padded convolutions `V → c → c → 1` with leaky ReLU between them, mean-pooled
/// over time to a scalar score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub vocab: usize,
    pub layers: [Conv1dLayer; 3],
}

impl Discriminator {
    pub fn new(store: &mut ParamStore<f64>, vocab: usize, channels: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        if vocab == 0 || channels == 0 || kernel == 0 {
            return Err(Error::invalid("discriminator", "sizes must be positive"));
        }
        let dims = [vocab, channels, channels, 1];
        let layers = [0, 1, 2].map(|i| Conv1dLayer::new(store, &format!("disc.conv{i}"), dims[i], dims[i + 1], kernel, 1, true, true, rng));
        Ok(Self { vocab, layers })
    }

    /// Score of one `T × V` sequence.
    pub fn score(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.vocab || s[0] == 0 {
            return Err(Error::shape("discriminator input", &s, &[s.first().copied().unwrap_or(0).max(1), self.vocab]));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < 2 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        g.mean(h)
    }
}

/// One-hot `T × V` encoding of a token sequence.
pub fn one_hot(tokens: &[usize], vocab: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; tokens.len() * vocab];
    for (t, &k) in tokens.iter().enumerate() {
        if k >= vocab {
            return Err(Error::invalid("one_hot", format!("token {k} outside vocabulary of {vocab}")));
        }
        data[t * vocab + k] = 1.0;
    }
    Tensor::new(vec![tokens.len(), vocab], data)
}
