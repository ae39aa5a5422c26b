use super::{ParamId, ParamStore};
use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), &[d_in, d_out], bound, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Self { w, b }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 1-D convolution over time-major input with optional bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dLayer {
    /// Creates a convolution; `same` pads so that stride-1 output length equals input length.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        same: bool,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel).max(1) as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), &[c_out, c_in, kernel], bound, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[c_out]));
        let (pad_left, pad_right) = if same {
            ((kernel - 1) / 2, kernel - 1 - (kernel - 1) / 2)
        } else {
            (0, 0)
        };
        Self {
            w,
            b,
            stride,
            pad_left,
            pad_right,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.conv1d(x, w, self.stride, self.pad_left, self.pad_right)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[dim]),
            beta: store.zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, S::lit(Self::EPS))
    }
}
