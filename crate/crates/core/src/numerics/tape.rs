//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to apply its vector-Jacobian product. Nodes are only ever appended,
//! so node order is a topological order and `backward` walks it in reverse.

use rand::Rng as _;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query position may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every position attends to every position.
    Dense,
    /// Position 0 is global (attends to and is attended by all); every other
    /// position `i` additionally sees positions `i-radius..=i+radius`,
    /// excluding position 0 from the band.
    SlidingGlobalFirst { radius: usize },
}

impl AttentionMask {
    /// Ascending key positions visible from query `i` in a length-`n` sequence.
    pub fn support(&self, i: usize, n: usize) -> Vec<usize> {
        match *self {
            AttentionMask::Dense => (0..n).collect(),
            AttentionMask::SlidingGlobalFirst { radius } => {
                if i == 0 {
                    return (0..n).collect();
                }
                let lo = i.saturating_sub(radius).max(1);
                let hi = (i + radius).min(n - 1);
                std::iter::once(0).chain(lo..=hi).collect()
            }
        }
    }
}

/// Sparse attention probabilities for one head: `rows[i]` lists
/// `(key position, weight)` for query `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl AttentionWeights {
    /// Dense copy of row `i` over `n` key positions.
    pub fn dense_row(&self, i: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(j, p) in &self.rows[i] {
            out[j] = p;
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: Vec<AttentionWeights>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn gelu_slope(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Adds a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, p, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, p, n))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        out.set_requires_grad(false);
        let c = ta.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let tracked = self.tracked(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Scale(a, c), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Mean(a), tracked))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Square(a), tracked)
    }

    /// Elementwise square root. The derivative at 0 is taken to be 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = t.map(f64::sqrt);
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Sqrt(a), tracked))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_value);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Gelu(a), tracked)
    }

    /// Row-wise softmax over the last dimension with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.set_requires_grad(false);
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let tracked = self.tracked(&[a]);
        self.push(out, Op::SoftmaxRows(a), tracked)
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for i in 0..rows {
            let r = tx.row(i);
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (r[j] - mu) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Dropout { x: a, mask }, tracked))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Row `i` of a matrix, as a `1×n` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    /// Rows `start..start + n` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, n: usize) -> Result<Var> {
        let t = self.value(a);
        if start + n > t.rows() || n == 0 {
            return Err(Error::Shape(format!(
                "rows {start}..{} out of range for {:?}",
                start + n,
                t.shape()
            )));
        }
        let c = t.cols();
        let out = Tensor::matrix(n, c, t.data()[start * c..(start + n) * c].to_vec())?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start, n), tracked))
    }

    /// Multi-head scaled dot-product attention over `n×d` query/key/value
    /// matrices, restricted by `mask`. Each head uses a contiguous slice of
    /// `d / n_heads` columns and is scaled by `1/√(d / n_heads)`.
    ///
    /// Cost is proportional to the number of visible (query, key) pairs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        mask: AttentionMask,
    ) -> Result<(Var, Vec<AttentionWeights>)> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if !tq.same_shape(tk) || !tq.same_shape(tv) || tq.shape().len() != 2 {
            return Err(shape_err("attention", tq, tk));
        }
        let (n, d) = (tq.rows(), tq.cols());
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Shape(format!(
                "width {d} not divisible into {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let supports: Vec<Vec<usize>> = (0..n).map(|i| mask.support(i, n)).collect();
        let mut out = vec![0.0; n * d];
        let mut heads = Vec::with_capacity(n_heads);
        let mut logits = Vec::new();
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut rows = Vec::with_capacity(n);
            for (i, sup) in supports.iter().enumerate() {
                let qi = &tq.row(i)[cols.clone()];
                logits.clear();
                logits.extend(sup.iter().map(|&j| {
                    let kj = &tk.row(j)[cols.clone()];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                }));
                softmax_in_place(&mut logits);
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&j, &p) in sup.iter().zip(logits.iter()) {
                    for (o, &vv) in orow.iter_mut().zip(&tv.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
                rows.push(sup.iter().copied().zip(logits.iter().copied()).collect());
            }
            heads.push(AttentionWeights { rows });
        }
        let out = Tensor::matrix(n, d, out)?;
        let tracked = self.tracked(&[q, k, v]);
        let node = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads: heads.clone(),
            },
            tracked,
        );
        Ok((node, heads))
    }

    /// Backpropagates from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.tracked)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, p, nn) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let bt = tb.transpose();
                    let da = matmul_raw(g, bt.data(), m, nn, p);
                    accumulate(&mut grads[a.0], m * p, |buf| add_into(buf, &da));
                }
                if wants(*b) {
                    let at = ta.transpose();
                    let db = matmul_raw(at.data(), g, p, m, nn);
                    accumulate(&mut grads[b.0], p * nn, |buf| add_into(buf, &db));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        accumulate(&mut grads[v.0], g.len(), |buf| add_into(buf, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| add_into(buf, g));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for ((o, gi), y) in buf.iter_mut().zip(g).zip(tb.data()) {
                            *o += gi * y;
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.len(), |buf| {
                        for ((o, gi), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                            *o += gi * x;
                        }
                    });
                }
            }
            Op::AddBias(a, bias) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| add_into(buf, g));
                }
                if wants(*bias) {
                    let c = val(*bias).len();
                    accumulate(&mut grads[bias.0], c, |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            buf[i % c] += gi;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi)
                    });
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if wants(*a) {
                    let len = val(*a).len();
                    let s = match node.op {
                        Op::Mean(_) => g[0] / len as f64,
                        _ => g[0],
                    };
                    accumulate(&mut grads[a.0], len, |buf| {
                        buf.iter_mut().for_each(|o| *o += s)
                    });
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                            *o += 2.0 * xi * gi;
                        }
                    });
                }
            }
            Op::Sqrt(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                            if *yi > 0.0 {
                                *o += gi / (2.0 * yi);
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                            *o += gi * gelu_slope(*xi);
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let c = y.cols();
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for i in 0..y.rows() {
                            let yr = y.row(i);
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                buf[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*x).cols();
                let tg = val(*gain).data();
                if wants(*gain) {
                    accumulate(&mut grads[gain.0], d, |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            buf[i % d] += gi * xhat[i];
                        }
                    });
                }
                if wants(*bias) {
                    accumulate(&mut grads[bias.0], d, |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            buf[i % d] += gi;
                        }
                    });
                }
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        let nd = d as f64;
                        for (r, inv) in inv_std.iter().enumerate() {
                            let off = r * d;
                            let dxh: Vec<f64> = (0..d).map(|j| g[off + j] * tg[j]).collect();
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = dxh
                                .iter()
                                .zip(&xhat[off..off + d])
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in 0..d {
                                buf[off + j] += inv / nd * (nd * dxh[j] - s1 - xhat[off + j] * s2);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        for ((o, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                            *o += gi * m;
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if wants(*p) {
                        accumulate(&mut grads[p.0], len, |buf| {
                            add_into(buf, &g[off..off + len])
                        });
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start, n) => {
                if wants(*a) {
                    let t = val(*a);
                    let c = t.cols();
                    accumulate(&mut grads[a.0], t.len(), |buf| {
                        add_into(&mut buf[start * c..(start + n) * c], g)
                    });
                }
            }
            Op::Attention { q, k, v, heads } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (n, d) = (tq.rows(), tq.cols());
                let dh = d / heads.len();
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = Vec::new();
                for (h, w) in heads.iter().enumerate() {
                    let c0 = h * dh;
                    for (i, row) in w.rows.iter().enumerate() {
                        let gi = &g[i * d + c0..i * d + c0 + dh];
                        dp.clear();
                        for &(j, p) in row {
                            let vj = &tv.row(j)[c0..c0 + dh];
                            dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                            for (o, gg) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(gi) {
                                *o += p * gg;
                            }
                        }
                        let dot: f64 = row.iter().zip(&dp).map(|((_, p), q)| p * q).sum();
                        let qi = &tq.row(i)[c0..c0 + dh];
                        for (&(j, p), &dpj) in row.iter().zip(&dp) {
                            let ds = p * (dpj - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &tk.row(j)[c0..c0 + dh];
                            for t in 0..dh {
                                dq[i * d + c0 + t] += ds * kj[t];
                                dk[j * d + c0 + t] += ds * qi[t];
                            }
                        }
                    }
                }
                for (var, buf_src) in [(q, dq), (k, dk), (v, dv)] {
                    if wants(*var) {
                        accumulate(&mut grads[var.0], n * d, |buf| add_into(buf, &buf_src));
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::rng::rng_from_seed;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(m(&[&[1.0, 0.0]]));
        let b = t.constant(m(&[&[0.0], &[5.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[0.0]);

        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(m(&[&[5.0], &[6.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(m(&[
            &[0.0, 0.0],
            &[1000.0, 0.0],
            &[1.0f64.ln(), 3.0f64.ln()],
        ]));
        let s = t.softmax_rows(a);
        let out = t.value(s).data();
        assert_eq!(&out[0..2], &[0.5, 0.5]);
        assert!((out[2] - 1.0).abs() < 1e-12 && out[3] < 1e-300);
        assert!((out[4] - 0.25).abs() < 1e-12 && (out[5] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[4]));
        let b = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(m(&[&[1.0, 1.0, 1.0, 1.0]]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(m(&[&[-1.0, 1.0]]));
        let y = t.layer_norm(x, g, b, 1e-14).unwrap();
        let out = t.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);

        let g = t.constant(Tensor::zeros(&[3]));
        let b = t.constant(Tensor::full(&[3], 2.5));
        let x = t.constant(m(&[&[4.0, -7.0, 0.3]]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn gelu_limits() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 10.0]));
        let y = t.gelu(x);
        assert_eq!(t.value(y).data()[0], 0.0);
        assert!((t.value(y).data()[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_identity_cases_and_bad_rate() {
        let mut rng = rng_from_seed(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.dropout(x, 0.7, &mut rng, false).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0]);
        let y = t.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0]);
        assert!(t.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = rng_from_seed(42);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[10_000], 3.0));
        let y = t.dropout(x, 0.5, &mut rng, true).unwrap();
        let mean = t.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_trivial_cases() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.3, -2.0]));
        let c = t.constant(Tensor::scalar(4.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn sqrt_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(0.0));
        let s = t.sqrt(w).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(w).data(), &[0.0]);
    }

    #[test]
    fn sliding_support_matches_example() {
        let mask = AttentionMask::SlidingGlobalFirst { radius: 1 };
        assert_eq!(mask.support(3, 7), vec![0, 2, 3, 4]);
        assert_eq!(mask.support(1, 7), vec![0, 1, 2]);
        assert_eq!(mask.support(6, 7), vec![0, 5, 6]);
        assert_eq!(mask.support(0, 7), (0..7).collect::<Vec<_>>());
    }

    type Build = fn(&mut Tape, Var) -> Var;

    fn check_unary(x0: Tensor, build: Build) {
        let analytic = {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let y = build(&mut t, x);
            t.backward(y).unwrap().wrt(x)
        };
        let numeric = finite_diff_grad(
            |x| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let y = build(&mut t, xv);
                t.value(y).item().unwrap()
            },
            &x0,
            1e-5,
        );
        let err = crate::numerics::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn probe(t: &mut Tape, y: Var) -> Var {
        // A fixed, non-symmetric weighting so every output element matters.
        let n = t.value(y).len();
        let w = Tensor::new(
            t.value(y).shape().to_vec(),
            (0..n)
                .map(|i| 0.3 + 0.17 * i as f64 - 0.01 * (i * i) as f64)
                .collect(),
        )
        .unwrap();
        let w = t.constant(w);
        let p = t.mul(y, w).unwrap();
        t.sum(p)
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut rng = rng_from_seed(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x = sample(3, 4, 9);
        check_unary(x.clone(), |t, x| {
            let y = t.gelu(x);
            probe(t, y)
        });
        check_unary(x.clone(), |t, x| {
            let y = t.softmax_rows(x);
            probe(t, y)
        });
        check_unary(x.clone(), |t, x| {
            let g = t.constant(Tensor::vector(vec![1.2, -0.4, 0.8, 2.0]));
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, -0.3, 0.0]));
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            probe(t, y)
        });
        check_unary(x.clone(), |t, x| {
            let w = t.constant(sample(4, 2, 3));
            let y = t.matmul(x, w).unwrap();
            probe(t, y)
        });
        check_unary(x.clone(), |t, x| {
            let y = t.square(x);
            let s = t.mean(y).unwrap();
            t.sqrt(s).unwrap()
        });
        check_unary(x.clone(), |t, x| {
            let r = t.row(x, 1).unwrap();
            let c = t.concat_rows(&[x, r]).unwrap();
            probe(t, c)
        });
        check_unary(x, |t, x| {
            let b = t.constant(Tensor::vector(vec![0.5, 0.1, 0.2, 0.3]));
            let y = t.add_bias(x, b).unwrap();
            let y2 = t.mul(y, x).unwrap();
            let y3 = t.scale(y2, -0.7);
            probe(t, y3)
        });
    }

    #[test]
    fn gain_and_bias_gradients_match_finite_differences() {
        let x0 = sample(3, 4, 21);
        let g0 = Tensor::vector(vec![1.2, -0.4, 0.8, 2.0]);
        let build = |t: &mut Tape, g: Var, x: &Tensor| {
            let x = t.constant(x.clone());
            let b = t.constant(Tensor::vector(vec![0.1, 0.2, -0.3, 0.0]));
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            probe(t, y)
        };
        let mut t = Tape::new();
        let g = t.param(g0.clone());
        let y = build(&mut t, g, &x0);
        let analytic = t.backward(y).unwrap().wrt(g);
        let numeric = finite_diff_grad(
            |gv| {
                let mut t = Tape::new();
                let g = t.constant(gv.clone());
                let y = build(&mut t, g, &x0);
                t.value(y).item().unwrap()
            },
            &g0,
            1e-5,
        );
        assert!(crate::numerics::max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for mask in [
            AttentionMask::Dense,
            AttentionMask::SlidingGlobalFirst { radius: 1 },
        ] {
            let q0 = sample(6, 4, 1);
            let k0 = sample(6, 4, 2);
            let v0 = sample(6, 4, 3);
            for which in 0..3 {
                let build = |t: &mut Tape, x: Var| {
                    let mut vars = [q0.clone(), k0.clone(), v0.clone()].map(|m| t.constant(m));
                    vars[which] = x;
                    let (o, _) = t.attention(vars[0], vars[1], vars[2], 2, mask).unwrap();
                    probe(t, o)
                };
                let x0 = [&q0, &k0, &v0][which].clone();
                let mut t = Tape::new();
                let x = t.param(x0.clone());
                let y = build(&mut t, x);
                let analytic = t.backward(y).unwrap().wrt(x);
                let numeric = finite_diff_grad(
                    |xv| {
                        let mut t = Tape::new();
                        let x = t.constant(xv.clone());
                        let y = build(&mut t, x);
                        t.value(y).item().unwrap()
                    },
                    &x0,
                    1e-5,
                );
                let err = crate::numerics::max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "mask {mask:?} input {which}: {err}");
            }
        }
    }
}
