//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. Parameters enter the tape by name from a
//! [`ParamStore`]; after [`Tape::backward`] their gradients are added back into
//! the store with [`Tape::accumulate_param_grads`]. A tape is meant to be
//! dropped after one backward pass.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Samples per work block in batched conv / linear kernels. Fixed so that the
/// floating-point reduction order does not depend on the thread count.
const SAMPLE_BLOCK: usize = 16;
const ROW_BLOCK: usize = 64;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Reshape(Var),
    Add(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    KronPool {
        h: Var,
        weights: Var,
        gamma: Vec<f64>,
        blocks: usize,
    },
    MeanRows(Var),
    Mean(Vec<Var>),
    Concat(Vec<Var>),
    Cosine {
        a: Var,
        b: Var,
        dot: f64,
        na: f64,
        nb: f64,
    },
    ScaleShift {
        x: Var,
        w: Var,
        b: Var,
    },
    Bce {
        z: Var,
        labels: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Splits a `[c, h, w]` or `[b, c, h, w]` shape into `(b, c, h, w)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0])),
    }
}

fn with_batch(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![shape[0], c, h, w]
    }
}

/// Zero-padded 3x3 patch matrix: row `c*9 + ky*3 + kx`, column `y*w + x`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let y0 = 1usize.saturating_sub(ky);
                let y1 = (h + 1 - ky).min(h);
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let dst = &mut row[y * w + x0..y * w + x1];
                    let src = &plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    dst.copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let y0 = 1usize.saturating_sub(ky);
                let y1 = (h + 1 - ky).min(h);
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let src = &row[y * w + x0..y * w + x1];
                    let dst = &mut plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of a node; handy for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well formed")
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("constant", &shape, &[values.len()]));
        }
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    /// A differentiable input that is not stored in any [`ParamStore`].
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("variable", &shape, &[values.len()]));
        }
        Ok(self.push(shape, values, true, Op::Leaf))
    }

    /// Brings a named parameter onto the tape. Frozen parameters enter as
    /// constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let trainable = store.is_trainable(name);
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Leaf
        };
        Ok(self.push(t.shape().to_vec(), t.values().to_vec(), trainable, op))
    }

    /// `y = W x + b` applied to the last axis of `x` (`[.., n]` -> `[.., m]`).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let n = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != n {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let m = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / n;
        let mut out = vec![0.0; rows * m];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            par::for_each_chunk_mut(&mut out, ROW_BLOCK * m, |ci, chunk| {
                for (r_local, orow) in chunk.chunks_mut(m).enumerate() {
                    let r = ci * ROW_BLOCK + r_local;
                    let xr = &xv[r * n..(r + 1) * n];
                    for (i, o) in orow.iter_mut().enumerate() {
                        let bias = bv.map_or(0.0, |bv| bv[i]);
                        *o = bias + dot(&wv[i * n..(i + 1) * n], xr);
                    }
                }
            });
        }
        let mut shape = xs;
        *shape.last_mut().expect("nonempty") = m;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, rg, Op::Linear { x, w, b }))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x` is `[c, h, w]` or
    /// `[batch, c, h, w]`; `k` is `[c_out, c_in, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (b, c, h, w) = image_dims("conv2d", &xs)?;
        if ks.len() != 4 || ks[1] != c || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let o = ks[0];
        let hw = h * w;
        let j = c * 9;
        let mut out = vec![0.0; b * o * hw];
        {
            let xv = self.value(x);
            let kv = self.value(k);
            par::for_each_chunk_mut(&mut out, SAMPLE_BLOCK * o * hw, |bi, chunk| {
                let mut cols = vec![0.0; j * hw];
                for (s_local, osample) in chunk.chunks_mut(o * hw).enumerate() {
                    let s = bi * SAMPLE_BLOCK + s_local;
                    im2col(&xv[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                    for oi in 0..o {
                        let orow = &mut osample[oi * hw..(oi + 1) * hw];
                        for ji in 0..j {
                            axpy(kv[oi * j + ji], &cols[ji * hw..(ji + 1) * hw], orow);
                        }
                    }
                }
            });
        }
        let shape = with_batch(&xs, o, h, w);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(shape, out, rg, Op::Conv2d { x, k }))
    }

    /// 2x2 max pooling with stride 2; odd trailing edges pool over the
    /// partial window. Ties route the gradient to the lowest flat index.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = image_dims("maxpool2", &xs)?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x);
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = base + y * w + xx;
                            if best_idx == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oi = plane * ho * wo + oy * wo + ox;
                    out[oi] = best;
                    argmax[oi] = best_idx as u32;
                }
            }
        }
        let shape = with_batch(&xs, c, ho, wo);
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::MaxPool2 { x, argmax }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("nonempty shape");
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (orow, xrow) in out.chunks_mut(n).zip(xv.chunks(n)) {
            softmax_row(xrow, orow);
        }
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Softmax(x))
    }

    /// Per-channel normalization of a `[c, h, w]` / `[batch, c, h, w]` input
    /// with the given mean and inverse standard deviation, then `scale`/`shift`.
    /// With `batch_stats` the statistics are treated as functions of `x` in the
    /// backward pass.
    pub(crate) fn batchnorm_with_stats(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = image_dims("batchnorm", &xs)?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] || mean.len() != c {
            return Err(Error::shape("batchnorm", &xs, self.shape(scale)));
        }
        let hw = h * w;
        let xv = self.value(x);
        let sv = self.value(scale);
        let tv = self.value(shift);
        let mut out = vec![0.0; xv.len()];
        for s in 0..b {
            for ci in 0..c {
                let off = (s * c + ci) * hw;
                let (m, is, g, t) = (mean[ci], inv_std[ci], sv[ci], tv[ci]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = (v - m) * is * g + t;
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            xs,
            out,
            rg,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, v, rg, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || len == 0 || start + len > xs[0] {
            return Err(Error::shape("slice_rows", &xs, &[start, len]));
        }
        let row: usize = xs[1..].iter().product();
        let v = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, v, rg, Op::SliceRows { x, start }))
    }

    /// Phoneme-blocked weighted pooling: block `p` of the output (entries
    /// `p*d .. (p+1)*d`) is `sum_t weights[t] * gamma[t][p] * h[t]`.
    /// `h` is `[T, d]`, `weights` is `[T]`, `gamma` is constant `T x blocks`.
    pub fn kron_pool(&mut self, h: Var, weights: Var, gamma: &[f64], blocks: usize) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        if hs.len() != 2 {
            return Err(Error::shape("kron_pool", &hs, &[0, 0]));
        }
        let (t, d) = (hs[0], hs[1]);
        if self.shape(weights) != [t] {
            return Err(Error::shape("kron_pool weights", &hs, self.shape(weights)));
        }
        if blocks == 0 || gamma.len() != t * blocks {
            return Err(Error::shape(
                "kron_pool gamma",
                &hs,
                &[gamma.len() / blocks.max(1), blocks],
            ));
        }
        let hv = self.value(h);
        let wv = self.value(weights);
        let mut out = vec![0.0; blocks * d];
        for ti in 0..t {
            let hrow = &hv[ti * d..(ti + 1) * d];
            for p in 0..blocks {
                let a = wv[ti] * gamma[ti * blocks + p];
                axpy(a, hrow, &mut out[p * d..(p + 1) * d]);
            }
        }
        let rg = self.rg(h) || self.rg(weights);
        Ok(self.push(
            vec![blocks * d],
            out,
            rg,
            Op::KronPool {
                h,
                weights,
                gamma: gamma.to_vec(),
                blocks,
            },
        ))
    }

    /// Column means of a `[T, d]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("mean_rows", &xs, &[0, 0]));
        }
        let (t, d) = (xs[0], xs[1]);
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![d], out, rg, Op::MeanRows(x)))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::shape("mean", &shape, self.shape(x)));
            }
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        let n = xs.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(shape, out, rg, Op::Mean(xs.to_vec())))
    }

    /// Flat concatenation into a rank-1 node.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.value(x));
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let n = out.len();
        Ok(self.push(vec![n], out, rg, Op::Concat(xs.to_vec())))
    }

    /// Cosine similarity of two equally sized vectors, clamped to [-1, 1].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let na = dot(av, av).sqrt();
        let nb = dot(bv, bv).sqrt();
        if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
            return Err(Error::DegenerateSupervector);
        }
        let d = dot(av, bv);
        let s = (d / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![1],
            vec![s],
            rg,
            Op::Cosine {
                a,
                b,
                dot: d,
                na,
                nb,
            },
        ))
    }

    /// `w * x + b` with scalar (`[1]`) `w` and `b`.
    pub fn scale_shift(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.value(w).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape("scale_shift", self.shape(w), self.shape(b)));
        }
        let (wv, bv) = (self.value(w)[0], self.value(b)[0]);
        let out = self.value(x).iter().map(|&v| wv * v + bv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::ScaleShift { x, w, b }))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `labels`, with both
    /// log arguments clamped at 1e-12.
    pub fn bce(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce", self.shape(z), &[labels.len()]));
        }
        let mut loss = 0.0;
        for (&zi, &y) in zv.iter().zip(labels) {
            let p = sigmoid(zi).max(1e-12);
            let q = sigmoid(-zi).max(1e-12);
            loss -= y * p.ln() + (1.0 - y) * q.ln();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(z);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::Bce {
                z,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let k = *ls.last().unwrap_or(&0);
        let rows = self.value(logits).len() / k.max(1);
        if ls.len() != 2 || rows != labels.len() || labels.is_empty() {
            return Err(Error::shape("cross_entropy", &ls, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{k}"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, (&lab, row)) in labels.iter().zip(lv.chunks(k)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[lab];
            softmax_row(row, &mut probs[r * k..(r + 1) * k]);
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::SumSquares(x))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // Interior gradients are dropped once propagated; leaves keep theirs.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    /// Adds the gradient of every parameter node into the store's gradient
    /// buffers. A parameter used several times accumulates all uses. Nodes
    /// whose name is not in `store` belong to another store and are skipped.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if !store.contains(name) {
                    continue;
                }
                if let Some(g) = grads.grads[i].as_deref() {
                    let t = store.get_mut(name)?;
                    for (d, s) in t.grad_mut().iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Adds `f`'s contribution into the gradient slot of `v`, if it needs one.
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let ws = &nodes[w.0].shape;
                let (m, n) = (ws[0], ws[1]);
                let rows = xv.len() / n;
                acc(*x, grads, &mut |dx| {
                    par::for_each_chunk_mut(dx, ROW_BLOCK * n, |ci, chunk| {
                        for (r_local, dxr) in chunk.chunks_mut(n).enumerate() {
                            let r = ci * ROW_BLOCK + r_local;
                            for i in 0..m {
                                axpy(g[r * m + i], &wv[i * n..(i + 1) * n], dxr);
                            }
                        }
                    });
                });
                acc(*w, grads, &mut |dw| {
                    let part = par::block_reduce(rows, ROW_BLOCK * 4, m * n, |range, out| {
                        for r in range {
                            let xr = &xv[r * n..(r + 1) * n];
                            for i in 0..m {
                                axpy(g[r * m + i], xr, &mut out[i * n..(i + 1) * n]);
                            }
                        }
                    });
                    for (d, p) in dw.iter_mut().zip(part) {
                        *d += p;
                    }
                });
                if let Some(b) = b {
                    acc(*b, grads, &mut |db| {
                        for row in g.chunks(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, k } => {
                let xs = &nodes[x.0].shape;
                let (b, c, h, w) = image_dims("conv2d", xs).expect("validated in forward");
                let xv = &nodes[x.0].value;
                let kv = &nodes[k.0].value;
                let o = nodes[k.0].shape[0];
                let hw = h * w;
                let j = c * 9;
                acc(*k, grads, &mut |dk| {
                    let part = par::block_reduce(b, SAMPLE_BLOCK, o * j, |range, out| {
                        let mut cols = vec![0.0; j * hw];
                        for s in range {
                            im2col(&xv[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                            let gs = &g[s * o * hw..(s + 1) * o * hw];
                            for oi in 0..o {
                                let grow = &gs[oi * hw..(oi + 1) * hw];
                                for ji in 0..j {
                                    out[oi * j + ji] += dot(grow, &cols[ji * hw..(ji + 1) * hw]);
                                }
                            }
                        }
                    });
                    for (d, p) in dk.iter_mut().zip(part) {
                        *d += p;
                    }
                });
                acc(*x, grads, &mut |dx| {
                    par::for_each_chunk_mut(dx, SAMPLE_BLOCK * c * hw, |bi, chunk| {
                        let mut cols = vec![0.0; j * hw];
                        for (s_local, dxs) in chunk.chunks_mut(c * hw).enumerate() {
                            let s = bi * SAMPLE_BLOCK + s_local;
                            cols.iter_mut().for_each(|v| *v = 0.0);
                            let gs = &g[s * o * hw..(s + 1) * o * hw];
                            for oi in 0..o {
                                let grow = &gs[oi * hw..(oi + 1) * hw];
                                for ji in 0..j {
                                    axpy(kv[oi * j + ji], grow, &mut cols[ji * hw..(ji + 1) * hw]);
                                }
                            }
                            col2im_add(&cols, c, h, w, dxs);
                        }
                    });
                });
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, grads, &mut |dx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                });
            }
            Op::Relu(x) => {
                let y = &node.value;
                acc(*x, grads, &mut |dx| {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        if yi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, grads, &mut |dx| {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, grads, &mut |dx| {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *node.shape.last().expect("nonempty");
                acc(*x, grads, &mut |dx| {
                    for ((drow, yrow), grow) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = dot(yrow, grow);
                        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yi * (gi - s);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (b, c, h, w) = image_dims("batchnorm", &node.shape).expect("validated");
                let hw = h * w;
                let m = (b * hw) as f64;
                let xv = &nodes[x.0].value;
                let sv = &nodes[scale.0].value;
                // Per-channel sums of g and g * xhat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..b {
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        let (mu, is) = (mean[ci], inv_std[ci]);
                        for (&xi, &gi) in xv[off..off + hw].iter().zip(&g[off..off + hw]) {
                            sum_g[ci] += gi;
                            sum_gx[ci] += gi * (xi - mu) * is;
                        }
                    }
                }
                acc(*scale, grads, &mut |ds| {
                    for (d, v) in ds.iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                });
                acc(*shift, grads, &mut |dt| {
                    for (d, v) in dt.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                });
                acc(*x, grads, &mut |dx| {
                    for s in 0..b {
                        for ci in 0..c {
                            let off = (s * c + ci) * hw;
                            let (mu, is, gam) = (mean[ci], inv_std[ci], sv[ci]);
                            let (sg, sgx) = (sum_g[ci] / m, sum_gx[ci] / m);
                            for ((d, &xi), &gi) in dx[off..off + hw]
                                .iter_mut()
                                .zip(&xv[off..off + hw])
                                .zip(&g[off..off + hw])
                            {
                                if *batch_stats {
                                    let xhat = (xi - mu) * is;
                                    *d += gam * is * (gi - sg - xhat * sgx);
                                } else {
                                    *d += gam * is * gi;
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, grads, &mut |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, grads, &mut |dx| {
                        for (d, &gi) in dx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
            }
            Op::SliceRows { x, start } => {
                let row: usize = node.shape[1..].iter().product();
                acc(*x, grads, &mut |dx| {
                    for (d, &gi) in dx[start * row..].iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::KronPool {
                h,
                weights,
                gamma,
                blocks,
            } => {
                let hv = &nodes[h.0].value;
                let wv = &nodes[weights.0].value;
                let d = nodes[h.0].shape[1];
                let t = nodes[h.0].shape[0];
                let p = *blocks;
                acc(*h, grads, &mut |dh| {
                    for ti in 0..t {
                        let dhr = &mut dh[ti * d..(ti + 1) * d];
                        for pi in 0..p {
                            let a = wv[ti] * gamma[ti * p + pi];
                            axpy(a, &g[pi * d..(pi + 1) * d], dhr);
                        }
                    }
                });
                acc(*weights, grads, &mut |dw| {
                    for ti in 0..t {
                        let hr = &hv[ti * d..(ti + 1) * d];
                        let mut s = 0.0;
                        for pi in 0..p {
                            s += gamma[ti * p + pi] * dot(hr, &g[pi * d..(pi + 1) * d]);
                        }
                        dw[ti] += s;
                    }
                });
            }
            Op::MeanRows(x) => {
                let t = nodes[x.0].shape[0] as f64;
                let d = node.shape[0];
                acc(*x, grads, &mut |dx| {
                    for row in dx.chunks_mut(d) {
                        for (r, &gi) in row.iter_mut().zip(g) {
                            *r += gi / t;
                        }
                    }
                });
            }
            Op::Mean(xs) => {
                let n = xs.len() as f64;
                for v in xs {
                    acc(*v, grads, &mut |dx| {
                        for (d, &gi) in dx.iter_mut().zip(g) {
                            *d += gi / n;
                        }
                    });
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for v in xs {
                    let len = nodes[v.0].value.len();
                    acc(*v, grads, &mut |dx| {
                        for (d, &gi) in dx.iter_mut().zip(&g[off..off + len]) {
                            *d += gi;
                        }
                    });
                    off += len;
                }
            }
            Op::Cosine {
                a,
                b,
                dot: dab,
                na,
                nb,
            } => {
                let s = dab / (na * nb);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let g0 = g[0];
                acc(*a, grads, &mut |da| {
                    for ((d, &ai), &bi) in da.iter_mut().zip(av).zip(bv) {
                        *d += g0 * (bi / (na * nb) - s * ai / (na * na));
                    }
                });
                acc(*b, grads, &mut |db| {
                    for ((d, &ai), &bi) in db.iter_mut().zip(av).zip(bv) {
                        *d += g0 * (ai / (na * nb) - s * bi / (nb * nb));
                    }
                });
            }
            Op::ScaleShift { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = nodes[w.0].value[0];
                acc(*x, grads, &mut |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += wv * gi;
                    }
                });
                acc(*w, grads, &mut |dw| {
                    dw[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                });
                acc(*b, grads, &mut |db| {
                    db[0] += g.iter().sum::<f64>();
                });
            }
            Op::Bce { z, labels } => {
                let zv = &nodes[z.0].value;
                let scale = g[0] / labels.len() as f64;
                acc(*z, grads, &mut |dz| {
                    for ((d, &zi), &y) in dz.iter_mut().zip(zv).zip(labels) {
                        let p = sigmoid(zi);
                        let q = sigmoid(-zi);
                        // d/dz of -ln p is -q; of -ln q is p. Clamped terms are flat.
                        let mut gz = 0.0;
                        if p > 1e-12 {
                            gz -= y * q;
                        }
                        if q > 1e-12 {
                            gz += (1.0 - y) * p;
                        }
                        *d += scale * gz;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = *nodes[logits.0].shape.last().expect("nonempty");
                let scale = g[0] / labels.len() as f64;
                acc(*logits, grads, &mut |dl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == lab { 1.0 } else { 0.0 };
                            dl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, grads, &mut |dx| {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::SumSquares(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, grads, &mut |dx| {
                    for (d, &xi) in dx.iter_mut().zip(xv) {
                        *d += 2.0 * xi * g[0];
                    }
                });
            }
        }
    }
}
