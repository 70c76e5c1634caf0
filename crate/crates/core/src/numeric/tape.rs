use rand::Rng;

use super::kernels::{add_assign, column_sums, dot, matmul_nn, matmul_nt, matmul_tn};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions a query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
}

/// Kernel and stride of a square, unpadded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Vec<f32>),
    Relu(Var),
    MatMul(Var, Var),
    Softmax { x: Var, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f32> },
    Reshape(Var),
    Embedding { table: Var, ids: Vec<u32> },
    Sum(Var),
    Mean(Var),
    ScalarLoss { input: Var, grad: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Embedding { table, .. } => vec![*table],
            Op::ScalarLoss { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order and replays them in
/// reverse to accumulate gradients.
///
/// A tape supports exactly one [`Tape::backward`] call; build a new tape (or
/// call [`Tape::reset`]) for the next step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?.to_vec();
        Tensor::new(self.shape(v).to_vec(), g).ok()
    }

    /// Attention probabilities `[heads, q_len, k_len]` saved by an attention op.
    pub fn attention_probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.value(v).dims2()
    }

    fn map2(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.map2(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.map2(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.map2(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, c) = self.dims2(x)?;
        if self.value(bias).numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            add_assign(row, &b);
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c))
    }

    /// Elementwise product with a constant mask of the same length.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f32>) -> Result<Var, TensorError> {
        if mask.len() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        Ok(self.push(out, Op::MulConst(x, mask)))
    }

    /// Inverted dropout: zeroes elements with probability `p`, rescales the
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var, TensorError> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidArgument(format!("dropout probability {p} >= 1")));
        }
        let keep = 1.0 - p;
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
        self.push(out, Op::Relu(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        };
        let (Ok((m, k)), Ok((k2, n))) = (self.dims2(a), self.dims2(b)) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x·w + b` for `x[r×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let input = self.value(x);
        if !input.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = input.data();
        let mut out = vec![0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0f64;
                for l in 0..len {
                    total += ((src[at(l)] - max) as f64).exp();
                }
                for l in 0..len {
                    out[at(l)] = (((src[at(l)] - max) as f64).exp() / total) as f32;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Softmax { x, len, inner }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let input = self.value(x);
        if !input.is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let cols = *input.shape().last().unwrap();
        let mut out = input.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v as f64 - lse) as f32);
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var, TensorError> {
        let cols = *self.shape(x).last().unwrap();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / cols;
        let mut xhat = vec![0f32; src.len()];
        let mut inv_std = vec![0f32; rows];
        let mut out = vec![0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = inv as f32;
            for c in 0..cols {
                let xh = (row[c] as f64 - mean) * inv;
                xhat[r * cols + c] = xh as f32;
                out[r * cols + c] = (xh * g[c] as f64 + b[c] as f64) as f32;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Scaled dot-product multi-head attention over `q[tq×d]`, `k[tk×d]`,
    /// `v[tk×d]`. Heads split the model dimension into contiguous slices.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var, TensorError> {
        let (tq, d) = self.dims2(q)?;
        let (tk, dk) = self.dims2(k)?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: self.shape(q).to_vec(),
                right: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if mask == AttnMask::Causal && tq > tk {
            return Err(TensorError::InvalidArgument("causal attention needs tq <= tk".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0f32; heads * tq * tk];
        let mut out = vec![0f32; tq * d];
        let mut scores = vec![0f64; tk];
        let mut acc = vec![0f64; dh];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let visible = match mask {
                    AttnMask::None => tk,
                    AttnMask::Causal => i + 1,
                };
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..visible {
                    let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if !max.is_finite() {
                    return Err(TensorError::NonFinite { op: "attention" });
                }
                let mut total = 0f64;
                for s in &mut scores[..visible] {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                acc.iter_mut().for_each(|a| *a = 0.0);
                for j in 0..visible {
                    let p = scores[j] / total;
                    prow[j] = p as f32;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (a, &vv) in acc.iter_mut().zip(vj) {
                        *a += p * vv as f64;
                    }
                }
                for (o, &a) in out[i * d + off..i * d + off + dh].iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
        }
        let out = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Unpadded 2-D convolution over a channels-last input `[h, w, c_in]`
    /// with weights `[kernel·kernel·c_in, c_out]` and bias `[c_out]`.
    /// Output is `[h_out, w_out, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let (h, wd, cin) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            other => return Err(TensorError::Rank { expected: 3, shape: other.to_vec() }),
        };
        let (rows, cout) = self.dims2(w)?;
        let kk = geom.kernel * geom.kernel;
        if rows != kk * cin || self.value(b).numel() != cout {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let (Some(ho), Some(wo)) = (geom.out_len(h), geom.out_len(wd)) else {
            return Err(TensorError::InvalidArgument(format!(
                "input {h}x{wd} smaller than kernel {}",
                geom.kernel
            )));
        };
        let cols = im2col(self.value(x).data(), wd, cin, ho, wo, geom);
        let mut out = matmul_nn(&cols, self.value(w).data(), ho * wo, kk * cin, cout);
        let bias = self.value(b).data().to_vec();
        for row in out.chunks_mut(cout) {
            add_assign(row, &bias);
        }
        let out = Tensor::new(vec![ho, wo, cout], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Gathers rows of `table[v×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("embedding of an empty id sequence".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id as usize, bound: vocab });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let n = t.numel() as f64;
        self.push(Tensor::scalar((s / n) as f32), Op::Mean(x))
    }

    /// Records a scalar whose gradient with respect to `input` was computed
    /// alongside its value.
    pub fn scalar_with_grad(&mut self, input: Var, value: f32, grad: Vec<f32>) -> Result<Var, TensorError> {
        if grad.len() != self.value(input).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_with_grad",
                left: self.shape(input).to_vec(),
                right: vec![grad.len()],
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { input, grad }))
    }

    /// Mean over non-pad positions of the label-smoothed negative
    /// log-likelihood; see [`smoothed_cross_entropy`].
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        label_smoothing: f32,
        pad_id: u32,
    ) -> Result<Var, TensorError> {
        let (value, grad) = smoothed_cross_entropy(self.value(logits), targets, label_smoothing, pad_id)?;
        self.scalar_with_grad(logits, value as f32, grad)
    }

    /// Reverse pass from a scalar `loss`, populating gradients of every
    /// `requires_grad` ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Detached);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => add_assign(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        let node = &self.nodes[i];
        let mut updates: Vec<(Var, Vec<f32>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    updates.push((*a, g.iter().zip(y).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    updates.push((*b, g.iter().zip(x).map(|(g, x)| g * x).collect()));
                }
            }
            Op::AddRow(x, bias) => {
                let cols = self.value(*bias).numel();
                updates.push((*x, g.to_vec()));
                if self.wants(*bias) {
                    updates.push((*bias, column_sums(g, g.len() / cols, cols)));
                }
            }
            Op::Scale(x, c) => updates.push((*x, g.iter().map(|v| v * c).collect())),
            Op::MulConst(x, mask) => updates.push((*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())),
            Op::Relu(x) => {
                let src = self.value(*x).data();
                updates.push((*x, g.iter().zip(src).map(|(&g, &s)| if s > 0.0 { g } else { 0.0 }).collect()));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    updates.push((*a, matmul_nt(g, self.value(*b).data(), m, n, k)));
                }
                if self.wants(*b) {
                    updates.push((*b, matmul_tn(self.value(*a).data(), g, m, k, n)));
                }
            }
            Op::Softmax { x, len, inner } => {
                let y = node.value.data();
                let (len, inner) = (*len, *inner);
                let outer = y.len() / (len * inner);
                let mut dx = vec![0f32; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + c;
                        let s: f64 = (0..len).map(|l| g[at(l)] as f64 * y[at(l)] as f64).sum();
                        for l in 0..len {
                            dx[at(l)] = (y[at(l)] as f64 * (g[at(l)] as f64 - s)) as f32;
                        }
                    }
                }
                updates.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![0f32; y.len()];
                for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let s: f64 = gr.iter().map(|&v| v as f64).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (gv as f64 - (yv as f64).exp() * s) as f32;
                    }
                }
                updates.push((*x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let cols = self.value(*gain).numel();
                let gn = self.value(*gain).data();
                let rows = g.len() / cols;
                if self.wants(*x) {
                    let mut dx = vec![0f32; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0f64;
                        let mut mean_dx = 0f64;
                        for c in 0..cols {
                            let d = gr[c] as f64 * gn[c] as f64;
                            mean_d += d;
                            mean_dx += d * xr[c] as f64;
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let inv = inv_std[r] as f64;
                        for c in 0..cols {
                            let d = gr[c] as f64 * gn[c] as f64;
                            dx[r * cols + c] = (inv * (d - mean_d - xr[c] as f64 * mean_dx)) as f32;
                        }
                    }
                    updates.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut acc = vec![0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[c] += g[r * cols + c] as f64 * xhat[r * cols + c] as f64;
                        }
                    }
                    updates.push((*gain, acc.into_iter().map(|v| v as f32).collect()));
                }
                if self.wants(*bias) {
                    updates.push((*bias, column_sums(g, rows, cols)));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    probs,
                    g,
                );
                updates.push((*q, dq));
                updates.push((*k, dk));
                updates.push((*v, dv));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ho, wo, cout) = match node.value.shape() {
                    &[a, b, c] => (a, b, c),
                    _ => unreachable!(),
                };
                let m = ho * wo;
                let krows = self.value(*w).shape()[0];
                if self.wants(*w) {
                    updates.push((*w, matmul_tn(cols, g, m, krows, cout)));
                }
                if self.wants(*b) {
                    updates.push((*b, column_sums(g, m, cout)));
                }
                if self.wants(*x) {
                    let dcols = matmul_nt(g, self.value(*w).data(), m, cout, krows);
                    let xs = self.value(*x).shape();
                    let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                    updates.push((*x, col2im(&dcols, h, wd, cin, ho, wo, *geom)));
                }
            }
            Op::Reshape(x) => updates.push((*x, g.to_vec())),
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2().unwrap();
                let mut dt = vec![0f32; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut dt[id as usize * d..(id as usize + 1) * d], &g[r * d..(r + 1) * d]);
                }
                updates.push((*table, dt));
            }
            Op::Sum(x) => updates.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                updates.push((*x, vec![(g[0] as f64 / n as f64) as f32; n]));
            }
            Op::ScalarLoss { input, grad } => {
                updates.push((*input, grad.iter().map(|v| v * g[0]).collect()));
            }
        }
        for (v, grad) in updates {
            self.accumulate(v, grad);
        }
    }
}

/// Mean over non-pad positions of the label-smoothed negative
/// log-likelihood. The smoothed target puts `1 - smoothing` on the gold
/// class plus `smoothing / V` on every class. All-pad targets give 0.
pub fn smoothed_cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    label_smoothing: f32,
    pad_id: u32,
) -> Result<(f64, Vec<f32>), TensorError> {
    let (t, vocab) = logits.dims2()?;
    if targets.len() != t {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            left: vec![t, vocab],
            right: vec![targets.len()],
        });
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(TensorError::InvalidArgument(format!(
            "label smoothing {label_smoothing} outside [0, 1)"
        )));
    }
    let src = logits;
    if !src.is_finite() {
        return Err(TensorError::NonFinite { op: "cross_entropy" });
    }
    for &y in targets {
        if y != pad_id && y as usize >= vocab {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: y as usize, bound: vocab });
        }
    }
    let counted = targets.iter().filter(|&&y| y != pad_id).count();
    let mut grad = vec![0f32; t * vocab];
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let eps = label_smoothing as f64;
    let uniform = eps / vocab as f64;
    let norm = 1.0 / counted as f64;
    let mut total = 0f64;
    for (r, &y) in targets.iter().enumerate() {
        if y == pad_id {
            continue;
        }
        let row = src.row(r);
        let lse = log_sum_exp(row);
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (c, &z) in row.iter().enumerate() {
            let logp = z as f64 - lse;
            let target = uniform + if c == y as usize { 1.0 - eps } else { 0.0 };
            total -= target * logp;
            g[c] = ((logp.exp() - target) * norm) as f32;
        }
    }
    Ok((total * norm, grad))
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

fn im2col(x: &[f32], w: usize, cin: usize, ho: usize, wo: usize, geom: ConvGeom) -> Vec<f32> {
    let k = geom.kernel;
    let row_len = k * k * cin;
    let mut cols = vec![0f32; ho * wo * row_len];
    for oh in 0..ho {
        for ow in 0..wo {
            let dst = &mut cols[(oh * wo + ow) * row_len..(oh * wo + ow + 1) * row_len];
            for kh in 0..k {
                for kw in 0..k {
                    let src = ((oh * geom.stride + kh) * w + ow * geom.stride + kw) * cin;
                    let at = (kh * k + kw) * cin;
                    dst[at..at + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(dcols: &[f32], h: usize, w: usize, cin: usize, ho: usize, wo: usize, geom: ConvGeom) -> Vec<f32> {
    let k = geom.kernel;
    let row_len = k * k * cin;
    let mut dx = vec![0f32; h * w * cin];
    for oh in 0..ho {
        for ow in 0..wo {
            let src = &dcols[(oh * wo + ow) * row_len..(oh * wo + ow + 1) * row_len];
            for kh in 0..k {
                for kw in 0..k {
                    let dst = ((oh * geom.stride + kh) * w + ow * geom.stride + kw) * cin;
                    let at = (kh * k + kw) * cin;
                    add_assign(&mut dx[dst..dst + cin], &src[at..at + cin]);
                }
            }
        }
    }
    dx
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f32],
    g: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (tq, d) = q.dims2().unwrap();
    let tk = k.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0f64; tq * d];
    let mut dk = vec![0f64; tk * d];
    let mut dv = vec![0f64; tk * d];
    let mut dp = vec![0f64; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut weighted = 0f64;
            for j in 0..tk {
                let p = prow[j] as f64;
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = dot(gi, &vd[j * d + off..j * d + off + dh]);
                weighted += p * dp[j];
                for (c, &gv) in gi.iter().enumerate() {
                    dv[j * d + off + c] += p * gv as f64;
                }
            }
            let qi = &qd[i * d + off..i * d + off + dh];
            for j in 0..tk {
                let p = prow[j] as f64;
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - weighted) * scale;
                let kj = &kd[j * d + off..j * d + off + dh];
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kj[c] as f64;
                    dk[j * d + off + c] += ds * qi[c] as f64;
                }
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    (narrow(dq), narrow(dk), narrow(dv))
}
