//! Convolutional feature encoder, span masking and a pre-norm transformer with bucketed
//! relative position bias.

mod mask;
mod relpos;

pub use mask::{mask_indices, sample_mask, MaskSpec};
pub use relpos::{bucket_matrix, relpos_bucket};

use crate::audio::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::nn::{LayerNormLayer, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoderConfig {
    pub channels: usize,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl ConvEncoderConfig {
    pub fn paper() -> Self {
        Self {
            channels: 512,
            ..Self::default()
        }
    }

    /// Number of output frames for `n_samples` input samples.
    pub fn output_length(&self, n_samples: usize) -> Result<usize> {
        let mut t = n_samples;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if t < k {
                return Err(Error::invalid(
                    "output_length",
                    format!("{n_samples} samples is shorter than the receptive field of {}", self.receptive_field()),
                ));
            }
            t = (t - k) / s + 1;
        }
        Ok(t)
    }

    /// Samples covered by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        for (&k, &s) in self.kernels.iter().zip(&self.strides).rev() {
            rf = (rf - 1) * s + k;
        }
        rf
    }

    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }
}

impl Default for ConvEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            strides: vec![5, 2, 2, 2, 2, 2, 2],
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
        }
    }
}

/// Output frames of the default convolutional encoder.
pub fn output_length(n_samples: usize) -> Result<usize> {
    ConvEncoderConfig::default().output_length(n_samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub buckets: usize,
    pub max_distance: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn paper() -> Self {
        Self {
            layers: 12,
            dim: 768,
            ffn_dim: 3072,
            heads: 12,
            ..Self::default()
        }
    }

    /// The smaller model used for the supervision-layer ablation.
    pub fn ablation() -> Self {
        Self {
            layers: 12,
            dim: 384,
            ffn_dim: 1536,
            heads: 6,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 192,
            ffn_dim: 768,
            heads: 4,
            buckets: 32,
            max_distance: 128,
            dropout: 0.0,
        }
    }
}

/// What the encoder consumes: raw audio through the conv stack, or precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub enum Frontend {
    Waveform(ConvEncoderConfig),
    Features { dim: usize },
}

/// `conv:<channels>` or `features:<dim>`.
impl std::fmt::Display for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Frontend::Waveform(c) => write!(f, "conv:{}", c.channels),
            Frontend::Features { dim } => write!(f, "features:{dim}"),
        }
    }
}

impl std::str::FromStr for Frontend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, n) = s.split_once(':').ok_or("expected conv:<channels> or features:<dim>")?;
        let n: usize = n.parse().map_err(|_| format!("bad size {n:?}"))?;
        match kind {
            "conv" => Ok(Frontend::Waveform(ConvEncoderConfig {
                channels: n,
                ..ConvEncoderConfig::default()
            })),
            "features" => Ok(Frontend::Features { dim: n }),
            _ => Err(format!("unknown frontend {kind:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub frontend: Frontend,
    pub transformer: TransformerConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frontend: Frontend::Waveform(ConvEncoderConfig::default()),
            transformer: TransformerConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Wave(&'a Waveform<f64>),
    Features(&'a FeatureMatrix<f64>),
}

/// Owned encoder input.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderData {
    Wave(Waveform<f64>),
    Features(FeatureMatrix<f64>),
}

impl EncoderData {
    pub fn as_input(&self) -> EncoderInput<'_> {
        match self {
            EncoderData::Wave(w) => EncoderInput::Wave(w),
            EncoderData::Features(f) => EncoderInput::Features(f),
        }
    }

    /// Samples for waveforms, frames for features.
    pub fn len(&self) -> usize {
        match self {
            EncoderData::Wave(w) => w.len(),
            EncoderData::Features(f) => f.num_frames(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    norm: LayerNormLayer,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNormLayer,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ffn: LayerNormLayer,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    conv: Vec<ConvBlock>,
    /// Per-dimension standardization of feature inputs (non-trainable).
    feat_mean: Option<ParamId>,
    feat_std: Option<ParamId>,
    in_norm: Option<LayerNormLayer>,
    proj: Linear,
    mask_emb: ParamId,
    /// `[buckets, heads]`, shared by every layer.
    relpos: ParamId,
    blocks: Vec<Block>,
}

/// Hidden states `[input, o¹, …, o^L]` plus the attention probabilities of every layer and
/// head (`attention[l][h]`, each `T × T`).
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore<f64>, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let tc = &cfg.transformer;
        if tc.heads == 0 || tc.dim % tc.heads != 0 {
            return Err(Error::invalid("encoder", format!("dim {} not divisible by {} heads", tc.dim, tc.heads)));
        }
        if tc.buckets < 4 || tc.buckets % 2 != 0 {
            return Err(Error::invalid("encoder", "relative position buckets must be even and ≥ 4"));
        }
        let mut conv = Vec::new();
        let (mut feat_mean, mut feat_std, mut in_norm) = (None, None, None);
        let d_in = match &cfg.frontend {
            Frontend::Waveform(cc) => {
                if cc.strides.len() != cc.kernels.len() || cc.strides.is_empty() {
                    return Err(Error::invalid("encoder", "conv strides and kernels must be equal, nonempty lists"));
                }
                let mut c_in = 1;
                for (i, (&k, &s)) in cc.kernels.iter().zip(&cc.strides).enumerate() {
                    let bound = 1.0 / ((c_in * k) as f64).sqrt();
                    conv.push(ConvBlock {
                        w: store.uniform(format!("enc.conv{i}.w"), &[cc.channels, c_in, k], bound, rng),
                        b: store.zeros(format!("enc.conv{i}.b"), &[cc.channels]),
                        norm: LayerNormLayer::new(store, &format!("enc.conv{i}.ln"), cc.channels),
                        stride: s,
                    });
                    c_in = cc.channels;
                }
                in_norm = Some(LayerNormLayer::new(store, "enc.feat_ln", cc.channels));
                cc.channels
            }
            Frontend::Features { dim } => {
                feat_mean = Some(store.buffer("enc.feat_mean", Tensor::zeros(&[*dim])));
                feat_std = Some(store.buffer("enc.feat_std", Tensor::ones(&[*dim])));
                *dim
            }
        };
        let proj = Linear::new(store, "enc.proj", d_in, tc.dim, true, rng);
        let mask_emb = store.uniform("enc.mask_emb", &[tc.dim], 1.0, rng);
        let relpos = store.zeros("enc.relpos", &[tc.buckets, tc.heads]);
        let blocks = (0..tc.layers)
            .map(|l| {
                let p = format!("enc.layer{l}");
                Block {
                    ln_attn: LayerNormLayer::new(store, &format!("{p}.ln_attn"), tc.dim),
                    q: Linear::new(store, &format!("{p}.q"), tc.dim, tc.dim, true, rng),
                    k: Linear::new(store, &format!("{p}.k"), tc.dim, tc.dim, true, rng),
                    v: Linear::new(store, &format!("{p}.v"), tc.dim, tc.dim, true, rng),
                    o: Linear::new(store, &format!("{p}.o"), tc.dim, tc.dim, true, rng),
                    ln_ffn: LayerNormLayer::new(store, &format!("{p}.ln_ffn"), tc.dim),
                    ff1: Linear::new(store, &format!("{p}.ff1"), tc.dim, tc.ffn_dim, true, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), tc.ffn_dim, tc.dim, true, rng),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            conv,
            feat_mean,
            feat_std,
            in_norm,
            proj,
            mask_emb,
            relpos,
            blocks,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.cfg.transformer.dim
    }

    pub fn mask_embedding(&self) -> ParamId {
        self.mask_emb
    }

    pub fn relpos_param(&self) -> ParamId {
        self.relpos
    }

    /// Number of encoder frames for an input of `len` samples (waveform) or frames (features).
    pub fn frames_for(&self, len: usize) -> Result<usize> {
        match &self.cfg.frontend {
            Frontend::Waveform(cc) => cc.output_length(len),
            Frontend::Features { .. } => Ok(len),
        }
    }

    /// The input span that produces encoder frames `[start, start + n)` on its own.
    pub fn crop(&self, data: &EncoderData, start: usize, n: usize) -> Result<EncoderData> {
        let total = self.frames_for(data.len())?;
        if n == 0 || start + n > total {
            return Err(Error::invalid("crop", format!("frames {start}..{} outside 0..{total}", start + n)));
        }
        match (data, &self.cfg.frontend) {
            (EncoderData::Wave(w), Frontend::Waveform(cc)) => {
                let a = start * cc.hop();
                let b = (a + (n - 1) * cc.hop() + cc.receptive_field()).min(w.len());
                Ok(EncoderData::Wave(Waveform::new(w.samples[a..b].to_vec(), w.sample_rate)?))
            }
            (EncoderData::Features(f), Frontend::Features { .. }) => {
                let frames = Tensor::new(vec![n, f.dim()], f.frames.data()[start * f.dim()..(start + n) * f.dim()].to_vec())?;
                Ok(EncoderData::Features(FeatureMatrix::new(frames, f.hop_ms, f.id.clone())?))
            }
            _ => Err(Error::invalid("crop", "input kind does not match the encoder frontend")),
        }
    }

    /// Marks the convolutional stack trainable or frozen.
    pub fn set_conv_trainable(&self, store: &mut ParamStore<f64>, trainable: bool) {
        for c in &self.conv {
            for id in [c.w, c.b, c.norm.gamma, c.norm.beta] {
                store.set_trainable(id, trainable);
            }
        }
    }

    /// Sets the feature standardization buffers from corpus statistics.
    pub fn fit_input_norm(&self, store: &mut ParamStore<f64>, feats: &[FeatureMatrix<f64>]) -> Result<()> {
        let (Some(mean_id), Some(std_id)) = (self.feat_mean, self.feat_std) else {
            return Ok(());
        };
        let d = store.get(mean_id).numel();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for f in feats {
            if f.dim() != d {
                return Err(Error::shape("fit_input_norm", &[d], &[f.dim()]));
            }
            for t in 0..f.num_frames() {
                for (j, &v) in f.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += f.num_frames();
        }
        if n == 0 {
            return Err(Error::invalid("fit_input_norm", "no frames"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-5))
            .collect();
        *store.get_mut(mean_id) = Tensor::vector(mean);
        *store.get_mut(std_id) = Tensor::vector(std);
        Ok(())
    }

    /// Convolutional features (`T × channels`) before projection.
    pub fn conv_forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, w: &Waveform<f64>) -> Result<Var> {
        let Frontend::Waveform(cc) = &self.cfg.frontend else {
            return Err(Error::invalid("conv_forward", "encoder consumes features, not waveforms"));
        };
        cc.output_length(w.len())?;
        let mut x = g.constant(Tensor::new(vec![w.len(), 1], w.samples.clone())?);
        for c in &self.conv {
            let wt = g.param(store, c.w);
            let b = g.param(store, c.b);
            x = g.conv1d(x, wt, c.stride, 0, 0)?;
            x = g.add_bias(x, b)?;
            x = c.norm.forward(g, store, x)?;
            x = g.gelu(x);
        }
        Ok(x)
    }

    /// Frontend output projected to the model dimension, before masking.
    pub fn embed(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, input: EncoderInput<'_>) -> Result<Var> {
        let x = match (input, &self.cfg.frontend) {
            (EncoderInput::Wave(w), Frontend::Waveform(_)) => {
                let x = self.conv_forward(g, store, w)?;
                self.in_norm.as_ref().expect("waveform frontend has a norm").forward(g, store, x)?
            }
            (EncoderInput::Features(f), Frontend::Features { dim }) => {
                if f.dim() != *dim {
                    return Err(Error::shape("encoder input", &[f.num_frames(), *dim], f.frames.shape()));
                }
                let mean = store.get(self.feat_mean.unwrap()).data();
                let std = store.get(self.feat_std.unwrap()).data();
                let d = *dim;
                let data = f.frames.data().iter().enumerate().map(|(i, &v)| (v - mean[i % d]) / std[i % d]).collect();
                g.constant(Tensor::new(f.frames.shape().to_vec(), data)?)
            }
            (EncoderInput::Wave(_), _) => return Err(Error::invalid("encoder", "expected features, got a waveform")),
            (EncoderInput::Features(_), _) => return Err(Error::invalid("encoder", "expected a waveform, got features")),
        };
        if g.shape(x)[0] == 0 {
            return Err(Error::invalid("encoder", "input produces no frames"));
        }
        self.proj.forward(g, store, x)
    }

    /// Replaces masked rows of `x` with the learned mask embedding.
    pub fn apply_time_mask(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var, mask: &[bool]) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Ok(x);
        }
        let emb = g.param(store, self.mask_emb);
        g.mask_rows(x, emb, mask)
    }

    /// Samples a span mask from `spec` and applies it; returns the masked frames and ℳ.
    pub fn sample_and_mask<R: rand::Rng>(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        x: Var,
        spec: &MaskSpec,
        rng: &mut R,
    ) -> Result<(Var, Vec<usize>)> {
        let mask = sample_mask(g.shape(x)[0], spec, rng);
        Ok((self.apply_time_mask(g, store, x, &mask)?, mask_indices(&mask)))
    }

    /// Per-head relative position bias, each `T × T`.
    fn relpos_bias(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, t: usize) -> Result<Vec<Var>> {
        let tc = &self.cfg.transformer;
        let table = g.param(store, self.relpos);
        let idx = bucket_matrix(t, tc.buckets, tc.max_distance);
        let gathered = g.gather_rows(table, &idx)?;
        let per_head = g.transpose(gathered)?;
        (0..tc.heads)
            .map(|h| {
                let row = g.slice_rows(per_head, h, 1)?;
                g.reshape(row, &[t, t])
            })
            .collect()
    }

    fn attention(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        b: &Block,
        x: Var,
        bias: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let tc = &self.cfg.transformer;
        let dh = tc.head_dim();
        let q = b.q.forward(g, store, x)?;
        let k = b.k.forward(g, store, x)?;
        let v = b.v.forward(g, store, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(tc.heads);
        let mut probs = Vec::with_capacity(tc.heads);
        for h in 0..tc.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let s = g.add(s, bias[h])?;
            let p = g.softmax(s);
            heads.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = g.concat_cols(&heads)?;
        Ok((b.o.forward(g, store, cat)?, probs))
    }

    /// Runs the transformer stack on already embedded (and possibly masked) frames.
    pub fn transformer_forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        x: Var,
        train: bool,
    ) -> Result<EncoderOutput> {
        let tc = &self.cfg.transformer;
        if g.shape(x).len() != 2 || g.shape(x)[1] != tc.dim {
            return Err(Error::shape("transformer", &[0, tc.dim], g.shape(x)));
        }
        let t = g.shape(x)[0];
        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(self.blocks.len());
        if self.blocks.is_empty() {
            return Ok(EncoderOutput { hidden, attention });
        }
        let bias = self.relpos_bias(g, store, t)?;
        let p = tc.dropout;
        let mut h = x;
        for b in &self.blocks {
            let n = b.ln_attn.forward(g, store, h)?;
            let (a, probs) = self.attention(g, store, b, n, &bias)?;
            let a = g.dropout(a, p, train)?;
            h = g.add(h, a)?;
            let n = b.ln_ffn.forward(g, store, h)?;
            let f = b.ff1.forward(g, store, n)?;
            let f = g.gelu(f);
            let f = b.ff2.forward(g, store, f)?;
            let f = g.dropout(f, p, train)?;
            h = g.add(h, f)?;
            hidden.push(h);
            attention.push(probs);
        }
        Ok(EncoderOutput { hidden, attention })
    }

    /// Embeds, masks (if `mask` is given) and encodes one utterance.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        input: EncoderInput<'_>,
        mask: Option<&[bool]>,
        train: bool,
    ) -> Result<EncoderOutput> {
        let mut x = self.embed(g, store, input)?;
        if let Some(mask) = mask {
            x = self.apply_time_mask(g, store, x, mask)?;
        }
        self.transformer_forward(g, store, x, train)
    }

    /// Eval-mode hidden state of `layer` (0 = embedded input) as a feature matrix.
    pub fn layer_features(&self, store: &ParamStore<f64>, input: EncoderInput<'_>, layer: usize, id: &str) -> Result<FeatureMatrix<f64>> {
        if layer > self.num_layers() {
            return Err(Error::invalid(
                "layer_features",
                format!("layer {layer} out of range for a {}-layer encoder", self.num_layers()),
            ));
        }
        let mut g = Graph::new(0);
        let x = self.embed(&mut g, store, input)?;
        let mut trimmed = self.clone();
        trimmed.blocks.truncate(layer);
        let out = trimmed.transformer_forward(&mut g, store, x, false)?;
        FeatureMatrix::new(g.value(out.hidden[layer]).clone(), 20, id)
    }
}

/// Eval-mode output of the convolutional encoder for one waveform (`T × channels`).
pub fn conv_encoder_forward(enc: &Encoder, store: &ParamStore<f64>, w: &Waveform<f64>) -> Result<FeatureMatrix<f64>> {
    let mut g = Graph::new(0);
    let x = enc.conv_forward(&mut g, store, w)?;
    FeatureMatrix::new(g.value(x).clone(), 20, "")
}
