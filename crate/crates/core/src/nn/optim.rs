use super::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
    steps: Vec<u64>,
}

impl<S: Real> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            moments: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (id, g) in grads {
            let i = id.index();
            if self.moments.len() <= i {
                self.moments.resize(i + 1, None);
                self.steps.resize(i + 1, 0);
            }
            let n = g.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let p = store.get_mut(*id).data_mut();
            let (sb1, sb2) = (S::lit(b1), S::lit(b2));
            let decay = S::lit(1.0 - lr * self.cfg.weight_decay);
            let step = S::lit(lr / bc1);
            let eps = S::lit(self.cfg.eps);
            let inv_bc2 = S::lit(1.0 / bc2);
            let c = S::lit(clip);
            for k in 0..n {
                let gk = g.data()[k] * c;
                m[k] = sb1 * m[k] + (S::one() - sb1) * gk;
                v[k] = sb2 * v[k] + (S::one() - sb2) * gk * gk;
                p[k] = p[k] * decay - step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Learning-rate schedules as a function of the (0-based) update index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant { peak: f64 },
    /// Linear warmup over `warmup_frac` of the updates, then linear decay to 0.
    WarmupLinear { peak: f64, warmup_frac: f64 },
    /// Linear warmup, constant hold, then linear decay to 0 at the final update.
    TriStage { peak: f64, warmup_frac: f64, hold_frac: f64 },
}

impl LrSchedule {
    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::Constant { peak }
            | LrSchedule::WarmupLinear { peak, .. }
            | LrSchedule::TriStage { peak, .. } => peak,
        }
    }

    /// Rate at training progress `frac ∈ [0, 1]`.
    pub fn at_fraction(&self, frac: f64) -> f64 {
        let f = frac.clamp(0.0, 1.0);
        match *self {
            LrSchedule::Constant { peak } => peak,
            LrSchedule::WarmupLinear { peak, warmup_frac } => {
                if warmup_frac > 0.0 && f < warmup_frac {
                    peak * f / warmup_frac
                } else if warmup_frac >= 1.0 {
                    peak
                } else {
                    peak * (1.0 - f) / (1.0 - warmup_frac)
                }
            }
            LrSchedule::TriStage {
                peak,
                warmup_frac,
                hold_frac,
            } => {
                let decay_start = warmup_frac + hold_frac;
                if warmup_frac > 0.0 && f < warmup_frac {
                    peak * f / warmup_frac
                } else if f <= decay_start {
                    peak
                } else if decay_start >= 1.0 {
                    peak
                } else {
                    peak * (1.0 - f) / (1.0 - decay_start)
                }
            }
        }
    }

    /// Rate for update `step` (1-based) out of `total`.
    pub fn at_step(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return 0.0;
        }
        self.at_fraction(step as f64 / total as f64)
    }
}
