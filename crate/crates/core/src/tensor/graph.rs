//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are stored in creation order, so the node list is already a topological
//! order and backward is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::counter_uniform;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Expand(Var),
    BroadcastRows(Var),
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    Conv1dInputGrad { g: Var, w: Var, geom: ConvGeom },
    Softmax(Var),
    LogSoftmax(Var),
    LeakyRelu(Var, S),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    XLogX(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
        batch_mean: Vec<S>,
        batch_var: Vec<S>,
    },
    Dropout { x: Var, mask: Vec<S> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<S>,
        targets: Vec<usize>,
        reduction: Reduction,
    },
    L2Norm(Var),
    NormalizeRows { x: Var, norms: Vec<S>, eps: S },
    MaskRows { x: Var, emb: Var, mask: Vec<bool> },
    Precomputed { x: Var, grad: Vec<S> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Expand(..) => "expand",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv1dInputGrad { .. } => "conv1d_input_grad",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::XLogX(..) => "xlogx",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Norm(..) => "l2_norm",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::MaskRows { .. } => "mask_rows",
            Op::Precomputed { .. } => "precomputed",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Expand(a)
            | Op::BroadcastRows(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LeakyRelu(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::XLogX(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::L2Norm(a) => vec![*a],
            Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Dropout { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::Precomputed { x, .. } => vec![*x],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Conv1dInputGrad { g, w, .. } => vec![*g, *w],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MaskRows { x, emb, .. } => vec![*x, *emb],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Batch-normalization mode.
#[derive(Clone, Debug)]
pub enum BatchNormMode<'a, S> {
    /// Normalize with statistics of the current batch.
    Train { eps: S },
    /// Normalize with supplied running statistics.
    Eval { mean: &'a [S], var: &'a [S], eps: S },
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Computation graph over scalar type `S`.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(ParamId, Var)>,
    seed: u64,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new(0)
    }
}

impl<S: Real> Graph<S> {
    /// Creates an empty graph; `seed` drives the counter-based dropout generator.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; trainable entries receive gradients.
    /// Binding the same parameter twice returns the first binding.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.leaf(store.get(id).clone(), trainable);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    /// Binds a stored parameter as a constant, regardless of its trainable flag.
    pub fn frozen_param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tag of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Batch statistics `(mean, biased variance)` recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[S], &[S])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                train: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Collects gradients of every bound trainable parameter (zeros when unreached).
    pub fn param_grads(&self, grads: &Grads<S>) -> Vec<(ParamId, Tensor<S>)> {
        self.params
            .iter()
            .map(|&(id, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, g)
            })
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    // ---- element-wise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let bn = self.value(b).numel().max(1);
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = *x + bias[i % bn];
        }
        Ok(self.push(Op::AddBias(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, S::zero())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > S::zero() { x } else { x * slope })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), kernels::softplus)
    }

    /// `x·ln x`, continuously extended with 0 at `x = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, Op::XLogX(a), |x| if x > S::zero() { x * x.ln() } else { S::zero() })
    }

    // ---- linear algebra and layout -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let v = Tensor::new(vec![c, r], kernels::transpose(self.value(a).data(), r, c))?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_rows", a)?;
        if start + len > r {
            return Err(Error::invalid("slice_rows", format!("rows {start}..{} out of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows { x: a, start }, v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if start + len > c {
            return Err(Error::invalid("slice_cols", format!("cols {start}..{} out of {c}", start + len)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { x: a, start }, v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows", "no inputs"));
        };
        let (_, c) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols", "no inputs"));
        };
        let (r, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Selects rows of a matrix; also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of {r} rows")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(Op::GatherRows { x: a, idx: idx.to_vec() }, v))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return Err(Error::shape("expand", self.shape(a), shape));
        }
        let v = Tensor::full(shape, self.value(a).item());
        Ok(self.push(Op::Expand(a), v))
    }

    /// Repeats a vector `[C]` as `rows` rows of a `[rows, C]` matrix.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let c = match *self.shape(a) {
            [c] => c,
            ref s => return Err(Error::invalid("broadcast_rows", format!("expected a vector, got {s:?}"))),
        };
        let src = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::BroadcastRows(a), v))
    }

    /// Strided 1-D convolution of time-major `x: [T, C_in]` with `w: [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (t_in, c_in) = self.matrix_dims("conv1d", x)?;
        let (c_out, wc_in, kernel) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            _ => return Err(Error::shape("conv1d", self.shape(x), self.shape(w))),
        };
        if wc_in != c_in || stride == 0 || kernel == 0 {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeom {
            t_in,
            c_in,
            c_out,
            kernel,
            stride,
            pad_left,
            pad_right,
        };
        let data = kernels::conv1d(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.t_out(), c_out], data)?;
        Ok(self.push(Op::Conv1d { x, w, geom }, v))
    }

    fn conv1d_input_grad(&mut self, g: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let data = kernels::conv1d_input_grad(self.value(g).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.t_in, geom.c_in], data)?;
        Ok(self.push(Op::Conv1dInputGrad { g, w, geom }, v))
    }

    // ---- normalization -----------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = kernels::softmax_rows(t.data(), t.cols());
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = kernels::log_softmax_rows(t.data(), t.cols());
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::LogSoftmax(a), v)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x);
        let rows = if d == 0 { 0 } else { xs.numel() / d };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xs.numel()];
        let mut out = vec![S::zero(); xs.numel()];
        let mut inv_std = vec![S::zero(); rows];
        let dn = S::from_usize_lossy(d);
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(xs.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            v,
        ))
    }

    /// Batch normalization of `x: [N, C]` over its rows.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, S>) -> Result<Var> {
        let (n, c) = self.matrix_dims("batch_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let (train, mean, var, eps) = match mode {
            BatchNormMode::Train { eps } => {
                if n == 0 {
                    return Err(Error::invalid("batch_norm", "training mode needs at least one row"));
                }
                let nn = S::from_usize_lossy(n);
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        mean[j] = mean[j] + xs[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nn);
                for r in 0..n {
                    for j in 0..c {
                        let d = xs[r * c + j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nn);
                (true, mean, var, eps)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[mean.len()]));
                }
                (false, mean.to_vec(), var.to_vec(), eps)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); n * c];
        let mut out = vec![S::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (xs[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                batch_mean: if train { mean } else { Vec::new() },
                batch_var: if train { var } else { Vec::new() },
            },
            v,
        ))
    }

    /// Inverted dropout. The keep mask is a pure function of (graph seed, node index, element).
    pub fn dropout(&mut self, x: Var, p: S, train: bool) -> Result<Var> {
        if !(S::zero()..S::one()).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !train || p == S::zero() {
            return Ok(x);
        }
        let node = self.nodes.len() as u64;
        let keep = S::one() / (S::one() - p);
        let pf = p.as_f64();
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|i| {
                if counter_uniform(self.seed, node, i as u64) >= pf {
                    keep
                } else {
                    S::zero()
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, v))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = t.data().iter().copied().sum::<S>() / S::from_usize_lossy(t.numel());
        Ok(self.push(Op::Mean(a), Tensor::scalar(s)))
    }

    /// Column sums of `[R, C]` → `[C]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("sum_rows", a)?;
        let t = self.value(a);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o = *o + v;
            }
        }
        Ok(self.push(Op::SumRows(a), Tensor::vector(out)))
    }

    /// Column means of `[R, C]` → `[C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("mean_rows", a)?;
        if r == 0 {
            return Err(Error::invalid("mean_rows", "zero rows"));
        }
        let t = self.value(a);
        let rn = S::from_usize_lossy(r);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / rn);
        Ok(self.push(Op::MeanRows(a), Tensor::vector(out)))
    }

    /// Cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid("cross_entropy", format!("target {bad} out of {v} classes")));
        }
        if n == 0 && reduction == Reduction::Mean {
            return Err(Error::invalid("cross_entropy", "mean over zero rows"));
        }
        let lp = kernels::log_softmax_rows(self.value(logits).data(), v);
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            total = total - lp[i * v + t];
        }
        if reduction == Reduction::Mean {
            total = total / S::from_usize_lossy(n);
        }
        let probs = lp.iter().map(|&x| x.exp()).collect();
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                reduction,
            },
            Tensor::scalar(total),
        ))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|&x| x * x).sum::<S>().sqrt();
        self.push(Op::L2Norm(a), Tensor::scalar(n))
    }

    /// Divides each row by `(‖row‖₂ + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: S) -> Result<Var> {
        let (r, c) = self.matrix_dims("normalize_rows", a)?;
        let t = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            norms.push(n);
            data.extend(row.iter().map(|&x| x / (n + eps)));
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::NormalizeRows { x: a, norms, eps }, v))
    }

    /// Replaces rows flagged in `mask` with the vector `emb`.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.matrix_dims("mask_rows", x)?;
        if self.shape(emb) != [c] || mask.len() != r {
            return Err(Error::shape("mask_rows", self.shape(x), self.shape(emb)));
        }
        let mut v = self.value(x).clone();
        let e = self.value(emb).data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                v.row_mut(i).copy_from_slice(&e);
            }
        }
        Ok(self.push(
            Op::MaskRows {
                x,
                emb,
                mask: mask.to_vec(),
            },
            v,
        ))
    }

    /// Records a scalar function of `x` whose value and gradient were computed externally.
    pub fn precomputed(&mut self, x: Var, value: S, grad: Vec<S>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::shape("precomputed", self.shape(x), &[grad.len()]));
        }
        Ok(self.push(Op::Precomputed { x, grad }, Tensor::scalar(value)))
    }

    // ---- differentiation -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::NonScalarLoss(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(ln.value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, data: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches node"));
            }
        }
    }

    fn backprop_node(&self, i: usize, gt: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let g = gt.data();
        let out = &self.nodes[i].value;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                let bn = self.value(*b).numel().max(1);
                let mut db = vec![S::zero(); self.value(*b).numel()];
                for (k, &gv) in g.iter().enumerate() {
                    db[k % bn] = db[k % bn] + gv;
                }
                self.accumulate(grads, *b, db);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, kernels::transpose(g, c, r));
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = out.cols();
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + w].copy_from_slice(&g[row * w..(row + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(r * w);
                    for row in 0..r {
                        dp.extend_from_slice(&g[row * total + off..row * total + off + w]);
                    }
                    self.accumulate(grads, p, dp);
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] = dx[src * c + j] + g[r * c + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Expand(a) => self.accumulate(grads, *a, vec![g.iter().copied().sum()]),
            Op::BroadcastRows(a) => {
                let c = self.value(*a).numel();
                let mut da = vec![S::zero(); c];
                for row in g.chunks(c.max(1)) {
                    for (d, &v) in da.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Conv1d { x, w, geom } => {
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, *x, kernels::conv1d_input_grad(g, val(*w), geom));
                }
                if self.nodes[w.0].requires_grad {
                    self.accumulate(grads, *w, kernels::conv1d_weight_grad(val(*x), g, geom));
                }
            }
            Op::Conv1dInputGrad { g: gv, w, geom } => {
                if self.nodes[gv.0].requires_grad {
                    self.accumulate(grads, *gv, kernels::conv1d(g, val(*w), geom));
                }
                if self.nodes[w.0].requires_grad {
                    self.accumulate(grads, *w, kernels::conv1d_weight_grad(g, val(*gv), geom));
                }
            }
            Op::Softmax(a) => {
                let c = out.cols().max(1);
                let y = out.data();
                let mut dx = vec![S::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols().max(1);
                let y = out.data();
                let mut dx = vec![S::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let gs: S = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LeakyRelu(a, slope) => {
                let dx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > S::zero() { gv } else { gv * *slope })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let dx = g.iter().zip(val(*a)).map(|(&gv, &x)| gv * kernels::gelu_grad(x)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Tanh(a) => {
                let dx = g.iter().zip(out.data()).map(|(&gv, &y)| gv * (S::one() - y * y)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = g.iter().zip(out.data()).map(|(&gv, &y)| gv * y * (S::one() - y)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Exp(a) => {
                let dx = g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Log(a) => {
                let dx = g.iter().zip(val(*a)).map(|(&gv, &x)| gv / x).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Softplus(a) => {
                let dx = g.iter().zip(val(*a)).map(|(&gv, &x)| gv * kernels::sigmoid(x)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::XLogX(a) => {
                let dx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| gv * (x.max(S::min_positive_value()).ln() + S::one()))
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gam = val(*gamma);
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let mut dx = vec![S::zero(); g.len()];
                let dn = S::from_usize_lossy(d);
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = inv / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let (n, c) = (out.rows(), out.cols());
                let gam = val(*gamma);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + g[r * c + j] * xhat[r * c + j];
                        dbeta[j] = dbeta[j] + g[r * c + j];
                    }
                }
                let mut dx = vec![S::zero(); n * c];
                if *train {
                    let nn = S::from_usize_lossy(n);
                    for r in 0..n {
                        for j in 0..c {
                            let dh = g[r * c + j] * gam[j];
                            dx[r * c + j] = inv_std[j] / nn
                                * (nn * dh - dbeta[j] * gam[j] - xhat[r * c + j] * dgamma[j] * gam[j]);
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..c {
                            dx[r * c + j] = g[r * c + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Sum(a) => self.accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / S::from_usize_lossy(n); n]);
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let r = self.shape(*a)[0];
                let scale = if matches!(self.nodes[i].op, Op::MeanRows(_)) {
                    S::one() / S::from_usize_lossy(r)
                } else {
                    S::one()
                };
                let mut dx = Vec::with_capacity(r * g.len());
                for _ in 0..r {
                    dx.extend(g.iter().map(|&v| v * scale));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                reduction,
            } => {
                let v = self.value(*logits).cols();
                let scale = match reduction {
                    Reduction::Mean => g[0] / S::from_usize_lossy(targets.len()),
                    Reduction::Sum => g[0],
                };
                let mut dx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] = dx[r * v + t] - scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::L2Norm(a) => {
                let n = out.item();
                let dx = if n > S::zero() {
                    val(*a).iter().map(|&x| g[0] * x / n).collect()
                } else {
                    vec![S::zero(); self.value(*a).numel()]
                };
                self.accumulate(grads, *a, dx);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let c = out.cols();
                let xs = val(*x);
                let mut dx = vec![S::zero(); xs.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let d = n + *eps;
                    let xr = &xs[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let gx: S = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let k = if n > S::zero() { gx / (n * d * d) } else { S::zero() };
                    for j in 0..c {
                        dx[r * c + j] = gr[j] / d - xr[j] * k;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskRows { x, emb, mask } => {
                let c = out.cols();
                let mut dx = g.to_vec();
                let mut de = vec![S::zero(); c];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..c {
                            de[j] = de[j] + dx[r * c + j];
                            dx[r * c + j] = S::zero();
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *emb, de);
            }
            Op::Precomputed { x, grad } => {
                self.accumulate(grads, *x, grad.iter().map(|&d| d * g[0]).collect());
            }
        }
        Ok(())
    }

    /// Gradient of scalar `output` with respect to `wrt`, recorded as new graph nodes so
    /// that it can itself be differentiated (e.g. for gradient penalties).
    ///
    /// Only the operations on paths from `wrt` to `output` need differentiable adjoints;
    /// others yield [`Error::NoHigherOrder`].
    pub fn grad_graph(&mut self, output: Var, wrt: Var) -> Result<Var> {
        if self.value(output).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(output).to_vec()));
        }
        let n = output.0 + 1;
        let mut dep = vec![false; n];
        if wrt.0 < n {
            dep[wrt.0] = true;
            for i in wrt.0 + 1..n {
                dep[i] = self.nodes[i].op.inputs().iter().any(|v| dep[v.0]);
            }
        }
        if wrt.0 >= n || !dep[output.0] {
            let z = Tensor::zeros(self.shape(wrt));
            return Ok(self.constant(z));
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let ones = Tensor::ones(self.shape(output));
        adj[output.0] = Some(self.constant(ones));
        for i in (wrt.0 + 1..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !dep[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contribs: Vec<(Var, Var)> = match op {
                Op::Add(a, b) => vec![(a, g), (b, g)],
                Op::Sub(a, b) => {
                    let nb = if dep[b.0] { self.scale(g, -S::one()) } else { g };
                    vec![(a, g), (b, nb)]
                }
                Op::AddBias(a, b) => {
                    if dep[b.0] {
                        return Err(Error::NoHigherOrder("add_bias"));
                    }
                    vec![(a, g)]
                }
                Op::Mul(a, b) => {
                    let mut c = Vec::new();
                    if dep[a.0] {
                        c.push((a, self.mul(g, b)?));
                    }
                    if dep[b.0] {
                        c.push((b, self.mul(g, a)?));
                    }
                    c
                }
                Op::Scale(a, s) => vec![(a, self.scale(g, s))],
                Op::AddScalar(a) => vec![(a, g)],
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    vec![(a, self.reshape(g, &shape)?)]
                }
                Op::Transpose(a) => vec![(a, self.transpose(g)?)],
                Op::MatMul(a, b) => {
                    let mut c = Vec::new();
                    if dep[a.0] {
                        let bt = self.transpose(b)?;
                        c.push((a, self.matmul(g, bt)?));
                    }
                    if dep[b.0] {
                        let at = self.transpose(a)?;
                        c.push((b, self.matmul(at, g)?));
                    }
                    c
                }
                Op::Conv1d { x, w, geom } => {
                    if dep[w.0] {
                        return Err(Error::NoHigherOrder("conv1d"));
                    }
                    vec![(x, self.conv1d_input_grad(g, w, geom)?)]
                }
                Op::LeakyRelu(a, slope) => {
                    let m = self.value(a).map(|x| if x > S::zero() { S::one() } else { slope });
                    let mv = self.constant(m);
                    vec![(a, self.mul(g, mv)?)]
                }
                Op::Tanh(a) => {
                    let y = Var(i);
                    let yy = self.mul(y, y)?;
                    let neg = self.scale(yy, -S::one());
                    let d = self.add_scalar(neg, S::one());
                    vec![(a, self.mul(g, d)?)]
                }
                Op::Sum(a) => {
                    let shape = self.shape(a).to_vec();
                    vec![(a, self.expand(g, &shape)?)]
                }
                Op::Mean(a) => {
                    let shape = self.shape(a).to_vec();
                    let n = S::from_usize_lossy(self.value(a).numel());
                    let gs = self.scale(g, S::one() / n);
                    vec![(a, self.expand(gs, &shape)?)]
                }
                Op::SumRows(a) => {
                    let r = self.shape(a)[0];
                    vec![(a, self.broadcast_rows(g, r)?)]
                }
                Op::MeanRows(a) => {
                    let r = self.shape(a)[0];
                    let gs = self.scale(g, S::one() / S::from_usize_lossy(r));
                    vec![(a, self.broadcast_rows(gs, r)?)]
                }
                Op::Expand(a) => vec![(a, self.sum(g))],
                Op::BroadcastRows(a) => vec![(a, self.sum_rows(g)?)],
                other => return Err(Error::NoHigherOrder(other.name())),
            };
            for (target, c) in contribs {
                if !dep[target.0] {
                    continue;
                }
                adj[target.0] = Some(match adj[target.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        match adj[wrt.0] {
            Some(v) => Ok(v),
            None => {
                let z = Tensor::zeros(self.shape(wrt));
                Ok(self.constant(z))
            }
        }
    }
}
