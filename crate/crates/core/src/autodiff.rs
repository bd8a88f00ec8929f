//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose parents already exist, so the push order is a topological
//! order and backward is a single reverse sweep. Graphs are built for one
//! forward pass and dropped afterwards.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x · Φ(x)` with `Φ` the standard normal CDF (via `erf`).
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
    Sum,
}

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Act(Activation, usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        offset: usize,
    },
    Concat(Vec<usize>),
    GridAvgPool {
        x: usize,
        w: usize,
        s: usize,
    },
    Bce {
        p: usize,
        labels: Vec<f64>,
    },
    CrossEntropy {
        x: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(&self.nodes[v.id])
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { graph: self.id, id }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradient accumulated into a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.id).and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.id, b.id), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(t, Op::Add(a.id, b.id), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(t, Op::Mul(a.id, b.id), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.check(a)?.value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.id]);
        Ok(self.push(t, Op::Scale(a.id, c), rg))
    }

    /// `x[.., n] + b[n]`, broadcasting `b` over every leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.check(x)?.value, &self.check(b)?.value);
        let n = *tx.shape().last().unwrap_or(&1);
        if tb.shape() != [n] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.id, b.id]);
        Ok(self.push(t, Op::AddBias(x.id, b.id), rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(t, Op::Act(kind, x.id), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let (outer, len, inner) = axis_split(tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mx = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (src[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[idx(i)] /= sum;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(t, Op::Softmax { x: x.id, axis }, rg))
    }

    /// Reduce along `axis`, removing it from the shape. Max routes its
    /// gradient to the first maximal entry.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let (outer, len, inner) = axis_split(tx.shape(), axis)?;
        if len == 0 {
            return Err(Error::EmptyAxis);
        }
        let src = tx.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let r = o * inner + j;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(|i| src[idx(i)]).sum();
                        out[r] = if kind == ReduceKind::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for i in 1..len {
                            if src[idx(i)] > src[idx(best)] {
                                best = i;
                            }
                        }
                        out[r] = src[idx(best)];
                        argmax[r] = best;
                    }
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(
            t,
            Op::Reduce {
                kind,
                x: x.id,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?.value.numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(ReduceKind::Sum, flat, 0)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let n = *tx.shape().last().unwrap_or(&1);
        for p in [gamma, beta] {
            let tp = &self.check(p)?.value;
            if tp.shape() != [n] {
                return Err(Error::shape("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / n;
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.id, gamma.id, beta.id]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let (m, n) = match tx.shape() {
            [m, n] => (*m, *n),
            s => return Err(Error::shape("transpose", s, &[0, 0])),
        };
        let src = tx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(t, Op::Transpose(x.id), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.check(x)?.value.clone().reshape(shape)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(t, Op::Reshape(x.id), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let (m, n) = match tx.shape() {
            [m, n] if start + len <= *n && len > 0 => (*m, *n),
            s => return Err(Error::shape("slice_cols", s, &[start, len])),
        };
        let mut out = Vec::with_capacity(m * len);
        for row in tx.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(t, Op::SliceCols { x: x.id, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let m = self.check(parts[0])?.value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = &self.check(p)?.value;
            match tp.shape() {
                [pm, pn] if *pm == m => widths.push(*pn),
                s => return Err(Error::shape("concat_cols", s, &[m, 0])),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        let ids = parts.iter().map(|p| p.id).collect::<Vec<_>>();
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::ConcatCols(ids), rg))
    }

    /// Entries `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let shape = tx.shape();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::shape("slice_rows", shape, &[start, len]));
        }
        let inner: usize = shape[1..].iter().product();
        let data = tx.data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(
            t,
            Op::SliceRows {
                x: x.id,
                offset: start * inner,
            },
            rg,
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice_rows(x, i, 1)?;
        let inner = self.shape(s)[1..].to_vec();
        self.reshape(s, &inner)
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.check(parts[0])?.value.shape().to_vec();
        if first.is_empty() {
            return Err(Error::shape("concat_rows", &first, &[]));
        }
        let mut lead = 0;
        for &p in parts {
            let s = self.check(p)?.value.shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", &first, s));
            }
            lead += s[0];
        }
        let mut shape = first.clone();
        shape[0] = lead;
        self.concat_data(parts, shape)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack of zero tensors".into()));
        }
        let first = self.check(parts[0])?.value.shape().to_vec();
        for &p in parts {
            let s = self.check(p)?.value.shape();
            if s != first.as_slice() {
                return Err(Error::shape("stack", &first, s));
            }
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        self.concat_data(parts, shape)
    }

    fn concat_data(&mut self, parts: &[Var], shape: Vec<usize>) -> Result<Var> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(shape, data)?;
        let ids = parts.iter().map(|p| p.id).collect::<Vec<_>>();
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::Concat(ids), rg))
    }

    /// Average-pool an `h×w` token grid (`x` is `[h·w, d]`, row-major) with
    /// non-overlapping `s×s` windows. Output rows enumerate windows row-major.
    pub fn grid_avg_pool(&mut self, x: Var, h: usize, w: usize, s: usize) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let d = match tx.shape() {
            [n, d] if *n == h * w => *d,
            sh => return Err(Error::shape("grid_avg_pool", sh, &[h * w, 0])),
        };
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidArgument(format!(
                "window {s} does not tile a {h}x{w} grid"
            )));
        }
        let (wh, ww) = (h / s, w / s);
        let src = tx.data();
        let mut out = vec![0.0; wh * ww * d];
        let inv = 1.0 / (s * s) as f64;
        for wr in 0..wh {
            for wc in 0..ww {
                let orow = &mut out[(wr * ww + wc) * d..(wr * ww + wc + 1) * d];
                for i in 0..s {
                    for j in 0..s {
                        let tok = (wr * s + i) * w + wc * s + j;
                        for (o, &v) in orow.iter_mut().zip(&src[tok * d..(tok + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let t = Tensor::new(vec![wh * ww, d], out)?;
        let rg = self.rg(&[x.id]);
        Ok(self.push(t, Op::GridAvgPool { x: x.id, w, s }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` (shape `[b]`) against
    /// 0/1 labels, with `p` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let tp = &self.check(p)?.value;
        if tp.rank() != 1 || tp.numel() != labels.len() {
            return Err(Error::shape("bce", tp.shape(), &[labels.len()]));
        }
        let b = labels.len() as f64;
        let mut loss = 0.0;
        for (&pi, &yi) in tp.data().iter().zip(labels) {
            let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        let t = Tensor::scalar(loss / b);
        let rg = self.rg(&[p.id]);
        Ok(self.push(
            t,
            Op::Bce {
                p: p.id,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of row logits `x` (`[b, k]`) against class
    /// indices, fused so the backward rule is `(softmax(x) - onehot) / b`.
    pub fn cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let tx = &self.check(x)?.value;
        let (b, k) = tx.dims2()?;
        if b != targets.len() {
            return Err(Error::shape("cross_entropy", tx.shape(), &[targets.len(), k]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("class {t} out of range for {k} logits")));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (row, &t) in tx.data().chunks_exact(k).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - row[t];
            probs.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        let t = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[x.id]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                x: x.id,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients become available
    /// through [`Graph::grad`]. Returns the number of nodes visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        let node = self.check(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let requires_grad = node.requires_grad;
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_done = true;
        if !requires_grad {
            return Ok(0);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            let nodes = &self.nodes;
            let node = &nodes[id];
            let mut acc = |pid: usize, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[pid].requires_grad {
                    let buf = grads[pid].get_or_insert_with(|| vec![0.0; nodes[pid].value.numel()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    acc(*a, &mut |buf| gemm_a_bt_acc(&g, tb.data(), buf, m, k, n));
                    acc(*b, &mut |buf| gemm_at_b_acc(ta.data(), &g, buf, m, k, n));
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        acc(p, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, v)| *o += v));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, &mut |buf| {
                        for ((o, gv), bv) in buf.iter_mut().zip(&g).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, gv), av) in buf.iter_mut().zip(&g).zip(ta.data()) {
                            *o += gv * av;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, v)| *o += v * c));
                }
                Op::AddBias(x, b) => {
                    let n = nodes[*b].value.numel();
                    acc(*x, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, v)| *o += v));
                    acc(*b, &mut |buf| {
                        for row in g.chunks(n) {
                            buf.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    });
                }
                Op::Act(kind, x) => {
                    let (tx, ty) = (&nodes[*x].value, &node.value);
                    acc(*x, &mut |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            *o += g[i] * kind.derivative(tx.data()[i], ty.data()[i]);
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * len + i) * inner + j;
                                let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                                for i in 0..len {
                                    buf[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Reduce {
                    kind,
                    x,
                    axis,
                    argmax,
                } => {
                    let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis)?;
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let r = o * inner + j;
                                let idx = |i: usize| (o * len + i) * inner + j;
                                match kind {
                                    ReduceKind::Sum => (0..len).for_each(|i| buf[idx(i)] += g[r]),
                                    ReduceKind::Mean => {
                                        let v = g[r] / len as f64;
                                        (0..len).for_each(|i| buf[idx(i)] += v)
                                    }
                                    ReduceKind::Max => buf[idx(argmax[r])] += g[r],
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = nodes[*gamma].value.data();
                    let n = gm.len();
                    acc(*gamma, &mut |buf| {
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                buf[c] += gr[c] * hr[c];
                            }
                        }
                    });
                    acc(*beta, &mut |buf| {
                        for gr in g.chunks(n) {
                            buf.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                        }
                    });
                    acc(*x, &mut |buf| {
                        let nf = n as f64;
                        for r in 0..inv_std.len() {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..n {
                                let dh = gr[c] * gm[c];
                                s1 += dh;
                                s2 += dh * hr[c];
                            }
                            for c in 0..n {
                                let dh = gr[c] * gm[c];
                                buf[r * n + c] += inv_std[r] / nf * (nf * dh - s1 - hr[c] * s2);
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (m, n) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                    acc(*x, &mut |buf| {
                        for i in 0..m {
                            for j in 0..n {
                                buf[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(*x, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, v)| *o += v));
                }
                Op::SliceCols { x, start } => {
                    let n = nodes[*x].value.shape()[1];
                    let len = node.value.shape()[1];
                    acc(*x, &mut |buf| {
                        for (brow, grow) in buf.chunks_mut(n).zip(g.chunks(len)) {
                            brow[*start..start + len]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, v)| *o += v);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p].value.shape()[1];
                        acc(p, &mut |buf| {
                            for (brow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                                brow.iter_mut()
                                    .zip(&grow[col..col + w])
                                    .for_each(|(o, v)| *o += v);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceRows { x, offset } => {
                    acc(*x, &mut |buf| {
                        buf[*offset..offset + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(o, v)| *o += v);
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.numel();
                        acc(p, &mut |buf| {
                            buf.iter_mut()
                                .zip(&g[off..off + len])
                                .for_each(|(o, v)| *o += v);
                        });
                        off += len;
                    }
                }
                Op::GridAvgPool { x, w, s } => {
                    let d = node.value.shape()[1];
                    let ww = w / s;
                    let inv = 1.0 / (s * s) as f64;
                    let windows = node.value.shape()[0];
                    acc(*x, &mut |buf| {
                        for win in 0..windows {
                            let (wr, wc) = (win / ww, win % ww);
                            let grow = &g[win * d..(win + 1) * d];
                            for i in 0..*s {
                                for j in 0..*s {
                                    let tok = (wr * s + i) * w + wc * s + j;
                                    buf[tok * d..(tok + 1) * d]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(o, v)| *o += v * inv);
                                }
                            }
                        }
                    });
                }
                Op::Bce { p, labels } => {
                    let tp = nodes[*p].value.data();
                    let b = labels.len() as f64;
                    acc(*p, &mut |buf| {
                        for i in 0..labels.len() {
                            let pi = tp[i];
                            if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
                                let y = labels[i];
                                buf[i] += g[0] * -(y / pi - (1.0 - y) / (1.0 - pi)) / b;
                            }
                        }
                    });
                }
                Op::CrossEntropy { x, targets, probs } => {
                    let b = targets.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    acc(*x, &mut |buf| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                buf[i * k + j] += scale * (probs[i * k + j] - onehot);
                            }
                        }
                    });
                }
            }
            if matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                self.nodes[id].grad = Some(Tensor::new(shape, g)?);
            }
        }
        Ok(visited)
    }
}
