//! Slice-level numeric kernels shared by forward and backward passes.

use crate::real::Real;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, a, k, 1, b, n, 1, &mut out, n, 1);
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, a, k, 1, b, 1, k, &mut out, n, 1);
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    S::gemm(k, m, n, a, 1, k, b, n, 1, &mut out, n, 1);
    out
}

pub fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a strided, zero-padded 1-D convolution over time-major input `[T, C_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        let padded = self.t_in + self.pad_left + self.pad_right;
        if padded < self.kernel {
            0
        } else {
            (padded - self.kernel) / self.stride + 1
        }
    }

    #[inline]
    fn input_index(&self, to: usize, k: usize) -> Option<usize> {
        let pos = (to * self.stride + k) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

/// Reorders `[C_out, C_in, K]` weights into `[K, C_in, C_out]`.
fn weights_kio<S: Real>(w: &[S], g: &ConvGeom) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for k in 0..g.kernel {
                out[(k * g.c_in + ci) * g.c_out + co] = w[(co * g.c_in + ci) * g.kernel + k];
            }
        }
    }
    out
}

/// Unfolds the input into `[T_out, K·C_in]` patches (zeros where the window hits padding).
fn im2col<S: Real>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let t_out = g.t_out();
    let width = g.kernel * g.c_in;
    let mut cols = vec![S::zero(); t_out * width];
    for to in 0..t_out {
        for k in 0..g.kernel {
            if let Some(ti) = g.input_index(to, k) {
                let dst = to * width + k * g.c_in;
                cols[dst..dst + g.c_in].copy_from_slice(&x[ti * g.c_in..(ti + 1) * g.c_in]);
            }
        }
    }
    cols
}

pub fn conv1d<S: Real>(x: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let t_out = g.t_out();
    let cols = im2col(x, g);
    matmul(&cols, &weights_kio(w, g), t_out, g.kernel * g.c_in, g.c_out)
}

/// Vector-Jacobian product of `conv1d` with respect to its input.
pub fn conv1d_input_grad<S: Real>(grad_out: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let t_out = g.t_out();
    let width = g.kernel * g.c_in;
    let dcols = matmul_nt(grad_out, &weights_kio(w, g), t_out, g.c_out, width);
    let mut dx = vec![S::zero(); g.t_in * g.c_in];
    for to in 0..t_out {
        for k in 0..g.kernel {
            let Some(ti) = g.input_index(to, k) else { continue };
            let src = &dcols[to * width + k * g.c_in..to * width + (k + 1) * g.c_in];
            for (d, &v) in dx[ti * g.c_in..(ti + 1) * g.c_in].iter_mut().zip(src) {
                *d = *d + v;
            }
        }
    }
    dx
}

/// Vector-Jacobian product of `conv1d` with respect to its weights, in `[C_out, C_in, K]` layout.
pub fn conv1d_weight_grad<S: Real>(x: &[S], grad_out: &[S], g: &ConvGeom) -> Vec<S> {
    let t_out = g.t_out();
    let cols = im2col(x, g);
    let dwk = matmul_tn(&cols, grad_out, t_out, g.kernel * g.c_in, g.c_out);
    let mut dw = vec![S::zero(); dwk.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for k in 0..g.kernel {
                dw[(co * g.c_in + ci) * g.kernel + k] = dwk[(k * g.c_in + ci) * g.c_out + co];
            }
        }
    }
    dw
}

/// Row-wise softmax of a `rows × cols` matrix.
pub fn softmax_rows<S: Real>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (orow, xrow) in out.chunks_mut(cols).zip(x.chunks(cols)) {
        let m = xrow.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - m).exp();
            z = z + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

pub fn log_softmax_rows<S: Real>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (orow, xrow) in out.chunks_mut(cols).zip(x.chunks(cols)) {
        let lse = crate::real::log_sum_exp(xrow);
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}
