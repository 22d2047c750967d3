//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends a node to a [`Tape`]. Nodes are
//! created after their inputs, so the tape is always in topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use super::tensor::{axis_extents, gemm_acc, gemm_nt_acc, gemm_tn_acc, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient of the loss with respect to the output, and returns one gradient
/// per input, shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by [`Tape::batch_norm`] in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

/// Gradients of a scalar loss with respect to every tape leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<String>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

pub const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn same_dims(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let dims = x.dims();
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let n = x.numel();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; dims.len()];
    // Walk the output in row-major order, tracking the matching input offset.
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x.data()[src];
        for ax in (0..out_dims.len()).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= step[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_dims, out)
}

fn transpose_last2(x: &Tensor) -> Tensor {
    let nd = x.ndim();
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(nd - 2, nd - 1);
    permute_data(x, &perm)
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds a `cin×h×w` image into `(cin·k·k) × (oh·ow)` columns.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut cols = vec![0.0; cin * k * k * oh * ow];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = oi as isize + ki as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = oj as isize + kj as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * ow + oj] = x[(c * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut x = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = oi as isize + ki as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = oj as isize + kj as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[(c * h + ii as usize) * w + jj as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

/// Per-channel view of an `[B, C, rest…]` tensor: yields (channel, flat index).
fn for_each_channel_index(dims: &[usize], mut f: impl FnMut(usize, usize)) {
    let b = dims[0];
    let c = dims[1];
    let inner: usize = dims[2..].iter().product();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            for r in 0..inner {
                f(ci, base + r);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of every op named `op` return wrong gradients.
    /// Exists so the verification suite can prove it detects a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !self.value(*v).is_finite()),
            "{} produced a non-finite value from finite inputs",
            op.name()
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.dims().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.dims().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::MulScalar(a, c), &[a])
    }

    /// Adds a length-`n` vector to every row of a `[…, n]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.dims().last().unwrap();
        if tb.numel() != n {
            return Err(Error::shape(format!(
                "add_row: bias of {} values for rows of {n}",
                tb.numel()
            )));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(tx.dims().to_vec(), out);
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Matrix product of two 2-d tensors, or a batched product of two 3-d
    /// tensors sharing the leading batch dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, k2, n) = match (ta.dims(), tb.dims()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            (da, db) => {
                return Err(Error::shape(format!("matmul: incompatible shapes {da:?} · {db:?}")))
            }
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let dims = if ta.ndim() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(Tensor::from_parts(dims, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() < 2 {
            return Err(Error::shape("transpose needs at least 2 dimensions"));
        }
        let out = transpose_last2(self.value(a));
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.value(a).ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "permute: {perm:?} is not a permutation of {nd} axes"
            )));
        }
        let out = permute_data(self.value(a), perm);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(dims)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.value(*first).dims().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let d = self.value(*p).dims();
            let mismatch = d.len() != base.len()
                || d.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y);
            if mismatch {
                return Err(Error::shape(format!("concat: {d:?} incompatible with {base:?}")));
            }
            total += d[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.dims()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        Ok(self.push(Tensor::from_parts(dims, out), Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut dims = vec![1];
            dims.extend_from_slice(self.value(p).dims());
            lifted.push(self.reshape(p, &dims)?);
        }
        self.concat(&lifted, 0)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} out of range for {dims:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&dims, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut od = dims;
        od[axis] = len;
        Ok(self.push(Tensor::from_parts(od, out), Op::Slice { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::shape(format!("softmax axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_extents(t.dims(), axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| t.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (t.data()[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(t.dims().to_vec(), out);
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.dims().last().unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(format!(
                "layer_norm: gamma/beta of {}/{} values for rows of {d}",
                g.numel(),
                b.numel()
            )));
        }
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::from_parts(t.dims().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Stride-1 cross-correlation of a `cin×h×w` input with a
    /// `cout×cin×k×k` kernel plus per-channel bias, zero padded by `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[cin, h, wd], &[cout, cin2, k, k2]) = (tx.dims(), tw.dims()) else {
            return Err(Error::shape(format!(
                "conv2d: expected 3-d input and 4-d kernel, got {:?} and {:?}",
                tx.dims(),
                tw.dims()
            )));
        };
        if cin != cin2 || k != k2 || tb.numel() != cout || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: input {:?}, kernel {:?}, bias {:?}, pad {pad} are inconsistent",
                tx.dims(),
                tw.dims(),
                tb.dims()
            )));
        }
        let (cols, oh, ow) = im2col(tx.data(), cin, h, wd, k, pad);
        let mut out = vec![0.0; cout * oh * ow];
        for (co, row) in out.chunks_mut(oh * ow).enumerate() {
            row.fill(tb.data()[co]);
        }
        gemm_acc(tw.data(), &cols, &mut out, cout, cin * k * k, oh * ow);
        let out = Tensor::from_parts(vec![cout, oh, ow], out);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    /// Training-mode batch normalization of a `[B, C, …]` tensor with
    /// statistics over every axis except the channel axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::shape("batch_norm expects [B, C, ...]"));
        }
        let c = dims[1];
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::shape(format!("batch_norm: affine params must have {c} values")));
        }
        let count = t.numel() / c;
        let mut mean = vec![0.0; c];
        for_each_channel_index(&dims, |ci, i| mean[ci] += t.data()[i]);
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for_each_channel_index(&dims, |ci, i| {
            let d = t.data()[i] - mean[ci];
            var[ci] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= count as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for_each_channel_index(&dims, |ci, i| {
            let xh = (t.data()[i] - mean[ci]) * rstd[ci];
            xhat[i] = xh;
            out[i] = xh * g.data()[ci] + b.data()[ci];
        });
        let stats = BatchStats { mean, var, count };
        let out = Tensor::from_parts(dims, out);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Inference-mode batch normalization using stored statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::shape("batch_norm_eval expects [B, C, ...]"));
        }
        let c = dims[1];
        let (g, b) = (self.value(gamma), self.value(beta));
        if [g.numel(), b.numel(), running_mean.len(), running_var.len()] != [c; 4] {
            return Err(Error::shape(format!("batch_norm_eval: statistics must have {c} values")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; t.numel()];
        for_each_channel_index(&dims, |ci, i| {
            out[i] = (t.data()[i] - running_mean[ci]) * inv_std[ci] * g.data()[ci] + b.data()[ci];
        });
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
        };
        Ok(self.push(Tensor::from_parts(dims, out), op, &[x, gamma, beta]))
    }

    /// Records an externally defined op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let scale = match &self.fault {
                Some(f) if f == node.op.name() => 1.5,
                _ => 1.0,
            };
            for (input, contrib) in self.input_grads(node, &g) {
                let slot = grads[input.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
                for (s, c) in slot.iter_mut().zip(&contrib) {
                    *s += scale * c;
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.dims().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(tb).map(|(g, y)| g * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(ta).map(|(g, x)| g * x).collect()));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::MulScalar(a, c) => out.push((*a, g.iter().map(|v| v * c).collect())),
            Op::AddRow(x, b) => {
                out.push((*x, g.to_vec()));
                if self.needs(*b) {
                    let n = val(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nd = ta.ndim();
                let (m, k) = (ta.dims()[nd - 2], ta.dims()[nd - 1]);
                let n = tb.dims()[nd - 1];
                let batch = ta.numel() / (m * k);
                if self.needs(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for bi in 0..batch {
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::from_parts(node.value.dims().to_vec(), g.to_vec());
                out.push((*a, transpose_last2(&gt).into_data()));
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::from_parts(node.value.dims().to_vec(), g.to_vec());
                out.push((*a, permute_data(&gt, &inv).into_data()));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Concat(parts, axis) => {
                let dims = node.value.dims();
                let (outer, total, inner) = axis_extents(dims, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).dims()[*axis];
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((*p, gp));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full_dims = val(*x).dims();
                let (outer, full, inner) = axis_extents(full_dims, *axis);
                let len = node.value.dims()[*axis];
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.dims(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            m1 += gh;
                            m2 += gh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rs * (gr[j] * gam[j] - m1 - xr[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gv * xh;
                        gb[i % d] += gv;
                    }
                    out.push((*gamma, gg));
                    out.push((*beta, gb));
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect()));
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Conv2d { x, w, b, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, h, wd) = (tx.dims()[0], tx.dims()[1], tx.dims()[2]);
                let (cout, k) = (tw.dims()[0], tw.dims()[2]);
                let (oh, ow) = (node.value.dims()[1], node.value.dims()[2]);
                let ckk = cin * k * k;
                if self.needs(*w) {
                    let (cols, _, _) = im2col(tx.data(), cin, h, wd, k, *pad);
                    let mut gw = vec![0.0; tw.numel()];
                    gemm_nt_acc(g, &cols, &mut gw, cout, oh * ow, ckk);
                    out.push((*w, gw));
                }
                if self.needs(*x) {
                    let mut gcols = vec![0.0; ckk * oh * ow];
                    gemm_tn_acc(tw.data(), g, &mut gcols, ckk, cout, oh * ow);
                    out.push((*x, col2im(&gcols, cin, h, wd, k, *pad, oh, ow)));
                }
                if self.needs(*b) {
                    out.push((*b, g.chunks(oh * ow).map(|r| r.iter().sum()).collect()));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                let dims = node.value.dims();
                let gam = val(*gamma).data();
                let c = gam.len();
                let count = (g.len() / c) as f64;
                let mut gsum = vec![0.0; c];
                let mut gxsum = vec![0.0; c];
                for_each_channel_index(dims, |ci, i| {
                    gsum[ci] += g[i];
                    gxsum[ci] += g[i] * xhat[i];
                });
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for_each_channel_index(dims, |ci, i| {
                        let m1 = gam[ci] * gsum[ci] / count;
                        let m2 = gam[ci] * gxsum[ci] / count;
                        gx[i] = rstd[ci] * (g[i] * gam[ci] - m1 - xhat[i] * m2);
                    });
                    out.push((*x, gx));
                }
                out.push((*gamma, gxsum));
                out.push((*beta, gsum));
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let dims = node.value.dims();
                let gam = val(*gamma).data();
                let xv = val(*x).data();
                let c = gam.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for_each_channel_index(dims, |ci, i| {
                    gx[i] = g[i] * gam[ci] * inv_std[ci];
                    gg[ci] += g[i] * (xv[i] - mean[ci]) * inv_std[ci];
                    gb[ci] += g[i];
                });
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::Custom(inputs, op) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gt = Tensor::from_parts(node.value.dims().to_vec(), g.to_vec());
                for (v, gi) in inputs.iter().zip(op.backward(&tensors, &node.value, &gt)) {
                    out.push((*v, gi.into_data()));
                }
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}
