//! Central finite-difference oracles for the differentiation engine.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;

fn rel_err<S: Real>(analytic: S, numeric: S) -> S {
    (analytic - numeric).abs() / S::one().max(numeric.abs())
}

fn eval_scalar<S: Real, F>(f: &F, x: &Tensor<S>) -> Result<S>
where
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new(0);
    let xv = g.leaf(x.clone(), false);
    let out = f(&mut g, xv)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    Ok(s)
}

/// Max over elements of `|analytic − numeric| / max(1, |numeric|)` for the gradient of the
/// scalar function `f` at `x`, using central differences with step `eps`.
pub fn finite_diff_check<S: Real, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if eps <= S::zero() {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let mut g = Graph::new(0);
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let two = S::lit(2.0);
    let mut worst = S::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (two * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check over every trainable entry of a parameter store.
///
/// `f` builds the scalar objective from the store, binding parameters with
/// [`Graph::param`]. At most `max_per_param` evenly strided elements are probed per
/// tensor (`0` probes all of them).
pub fn finite_diff_check_params<S: Real, F>(store: &ParamStore<S>, f: F, eps: S, max_per_param: usize) -> Result<S>
where
    F: Fn(&mut Graph<S>, &ParamStore<S>) -> Result<Var>,
{
    let mut g = Graph::new(0);
    let out = f(&mut g, store)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("finite_diff_check_params objective".into()));
    }
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads);
    let eval = |s: &ParamStore<S>| -> Result<S> {
        let mut g = Graph::new(0);
        let out = f(&mut g, s)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check_params objective".into()));
        }
        Ok(v)
    };
    let two = S::lit(2.0);
    let mut probe = store.clone();
    let mut worst = S::zero();
    let mut seen = std::collections::HashSet::new();
    for (id, grad) in analytic {
        if !seen.insert(id) {
            continue;
        }
        let n = grad.numel();
        let stride = if max_per_param == 0 || n <= max_per_param {
            1
        } else {
            n.div_ceil(max_per_param)
        };
        for i in (0..n).step_by(stride) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (two * eps);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
