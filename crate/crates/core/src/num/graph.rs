//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints for
//! every node that (transitively) depends on a leaf created with
//! `requires_grad`. All reductions run in fixed index order, so a given tape
//! always produces the same bits.

use super::{math, ParamStore, Tensor};
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    LogSoftmax(Var),
    Softmax(Var, f64),
    Gather(Var, Vec<Option<usize>>),
    Reshape(Var),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stops: StopTape,
}

/// Values crossing stop-gradient sites ([`Graph::detach`] and
/// [`Graph::straight_through`]), in tape order. A graph built in replay mode
/// reuses the values recorded at another point instead of its own, which
/// lets finite differences see the same stop-gradient semantics as the
/// reverse sweep.
#[derive(Default)]
struct StopTape {
    recorded: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl StopTape {
    fn pass(&mut self, live: Tensor) -> Tensor {
        let t = match &self.replay {
            Some(r) => r[self.recorded.len()].clone(),
            None => live,
        };
        self.recorded.push(t.clone());
        t
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameter paths bound to leaves of a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Var {
        match self.vars.get(path) {
            Some(v) => *v,
            None => panic!("parameter `{path}` is not bound"),
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// Collects the gradient of every bound parameter, with zeros for
    /// parameters that received none (including frozen ones).
    pub fn gradients(&self, g: &Graph, grads: &Grads) -> ParamStore {
        let mut out = ParamStore::new();
        for (path, &v) in &self.vars {
            let shape = g.shape(v);
            let t = match grads.get(v) {
                Some(d) => Tensor::new(shape, d.to_vec()).expect("gradient shape"),
                None => Tensor::zeros(shape),
            };
            out.insert(path.clone(), t);
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose stop-gradient sites emit `stops` (as returned by
    /// [`Graph::stop_values`] on another graph with the same structure).
    pub fn replaying(stops: Vec<Tensor>) -> Self {
        Self { nodes: Vec::new(), stops: StopTape { recorded: Vec::new(), replay: Some(stops) } }
    }

    /// Values that crossed stop-gradient sites so far. For a straight-through
    /// site the recorded value is the offset `hard - soft`.
    pub fn stop_values(&self) -> Vec<Tensor> {
        self.stops.recorded.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds every parameter of `store` as a leaf. Paths for which
    /// `trainable` returns false become constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (path, t) in store.iter() {
            let v = self.leaf(t.clone(), trainable(path));
            vars.insert(String::from(path), v);
        }
        Bound { vars }
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

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
        };
        self.push(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.numel(), tb.numel(), "elementwise operands differ in size");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data).unwrap();
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Adds a vector of length `n` to every row of an `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = tr.numel();
        assert_eq!(ta.last_dim(), n, "row broadcast width");
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let value = Tensor::new(ta.shape(), data).unwrap();
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), math::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), math::sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_K * x * x * x)))
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), math::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums the trailing axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let shape = &t.shape()[..t.shape().len().saturating_sub(1)];
        let value = Tensor::new(shape, data).unwrap();
        self.push(value, Op::SumLast(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`; the left operand is viewed as rows over
    /// its trailing axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.last_dim();
        let m = ta.rows();
        assert_eq!(tb.shape().len(), 2, "matmul right operand must be 2-d");
        assert_eq!(tb.shape()[0], k, "matmul inner dimensions");
        let n = tb.shape()[1];
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::new(&[m, n], out).unwrap();
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Layer normalisation over the trailing axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.last_dim();
        assert_eq!(tg.numel(), n);
        assert_eq!(tb.numel(), n);
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape(), out).unwrap();
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`. `q`, `k`, `v` are `[batch * seq, d]`; position `i` attends to
    /// positions `0..=i` of its own sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let d = self.value(q).last_dim();
        assert_eq!(self.value(q).rows(), batch * seq);
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = math::exp(*s - max);
                        total += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..=i {
                        let p = scores[j] / total;
                        prow[j] = p;
                        let vj = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch * seq, d], out).unwrap();
        self.push(value, Op::Attention { q, k, v, batch, seq, heads, probs }, &[q, k, v])
    }

    /// Row-wise log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            data.extend(super::log_softmax_row(row));
        }
        let value = Tensor::new(t.shape(), data).unwrap();
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            data.extend(super::softmax_row(row, temperature));
        }
        let value = Tensor::new(t.shape(), data).unwrap();
        self.push(value, Op::Softmax(a, temperature), &[a])
    }

    /// Flat gather: `out[i] = src[index[i]]`, or `0` where the index is
    /// `None`. Covers embedding lookups, row selection, patch shuffles and
    /// zero-padded im2col.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Var {
        let sd = self.data(src);
        let data: Vec<f64> = index.iter().map(|i| i.map_or(0.0, |j| sd[j])).collect();
        let value = Tensor::new(shape, data).expect("gather output shape");
        self.push(value, Op::Gather(src, index), &[src])
    }

    /// Selects whole rows of an `[r, n]` tensor.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let n = self.value(src).last_dim();
        let mut index = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            index.extend((0..n).map(|j| Some(r * n + j)));
        }
        self.gather(src, index, &[rows.len(), n])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape).expect("reshape size");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// A constant copy of `a`: the value passes, gradients stop.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let value = self.stops.pass(value);
        self.constant(value)
    }

    /// Emits `hard` in the forward pass while routing the incoming gradient
    /// unchanged to `soft` in the backward pass.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Var {
        assert_eq!(self.value(soft).numel(), hard.numel(), "straight-through operands differ in size");
        let hard = hard.reshaped(self.shape(soft)).unwrap();
        let sv = self.value(soft).clone();
        let offset: Vec<f64> = hard.data().iter().zip(sv.data()).map(|(h, s)| h - s).collect();
        let offset = self.stops.pass(Tensor::new(sv.shape(), offset).unwrap());
        let value = if self.stops.replay.is_some() {
            let data = sv.data().iter().zip(offset.data()).map(|(s, o)| s + o).collect();
            Tensor::new(sv.shape(), data).unwrap()
        } else {
            hard
        };
        self.push(value, Op::StraightThrough(soft), &[soft])
    }

    /// Mean of squared differences between two equally sized tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *b, |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *b, |g| {
                    for (x, &d) in g.iter_mut().zip(gout) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bd[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ad[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *row, |g| {
                    let n = g.len();
                    for chunk in gout.chunks(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |g| {
                    for (x, &d) in g.iter_mut().zip(gout) {
                        *x += d * c;
                    }
                });
            }
            Op::Offset(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                self.acc(grads, *a, |g| add_into(g, gout));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.last_dim();
                let m = ta.rows();
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                self.acc(grads, *a, |g| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            g[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let dst = &mut g[p * n..(p + 1) * n];
                            for (x, &d) in dst.iter_mut().zip(grow) {
                                *x += aip * d;
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Gelu(a) => {
                let xd = self.data(*a);
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        let x = xd[i];
                        let t = math::tanh(GELU_C * (x + GELU_K * x * x * x));
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        g[i] += gout[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i];
                }
            }),
            Op::Square(a) => {
                let xd = self.data(*a);
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * 2.0 * xd[i];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let xd = self.data(*a);
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        if ad[i] <= bd[i] {
                            g[i] += gout[i];
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        if ad[i] > bd[i] {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |g| {
                for x in g.iter_mut() {
                    *x += gout[0];
                }
            }),
            Op::Mean(a) => self.acc(grads, *a, |g| {
                let c = gout[0] / g.len() as f64;
                for x in g.iter_mut() {
                    *x += c;
                }
            }),
            Op::SumLast(a) => self.acc(grads, *a, |g| {
                let n = g.len() / gout.len().max(1);
                for (chunk, &d) in g.chunks_mut(n).zip(gout) {
                    for x in chunk {
                        *x += d;
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*x).last_dim();
                let gd = self.data(*gain);
                self.acc(grads, *gain, |g| {
                    for (r, chunk) in gout.chunks(n).enumerate() {
                        for j in 0..n {
                            g[j] += chunk[j] * xhat[r * n + j];
                        }
                    }
                });
                self.acc(grads, *bias, |g| {
                    for chunk in gout.chunks(n) {
                        add_into(g, chunk);
                    }
                });
                self.acc(grads, *x, |g| {
                    for (r, chunk) in gout.chunks(n).enumerate() {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = chunk[j] * gd[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = chunk[j] * gd[j];
                            g[r * n + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, gout, grads);
            }
            Op::LogSoftmax(a) => self.acc(grads, *a, |g| {
                let n = node.value.last_dim();
                for (r, chunk) in gout.chunks(n).enumerate() {
                    let total: f64 = chunk.iter().sum();
                    for j in 0..n {
                        g[r * n + j] += chunk[j] - math::exp(y[r * n + j]) * total;
                    }
                }
            }),
            Op::Softmax(a, temperature) => self.acc(grads, *a, |g| {
                let n = node.value.last_dim();
                for (r, chunk) in gout.chunks(n).enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let dot: f64 = chunk.iter().zip(yr).map(|(d, p)| d * p).sum();
                    for j in 0..n {
                        g[r * n + j] += yr[j] * (chunk[j] - dot) / temperature;
                    }
                }
            }),
            Op::Gather(src, index) => self.acc(grads, *src, |g| {
                for (i, j) in index.iter().enumerate() {
                    if let Some(j) = j {
                        g[*j] += gout[i];
                    }
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).last_dim();
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let row = (b * seq + i) * d + off;
                    let go = &gout[row..row + dh];
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let col = (b * seq + j) * d + off;
                        let vj = &vd[col..col + dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        for c in 0..dh {
                            dv[col + c] += prow[j] * go[c];
                        }
                    }
                    for j in 0..=i {
                        let col = (b * seq + j) * d + off;
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        for c in 0..dh {
                            dq[row + c] += ds * kd[col + c];
                            dk[col + c] += ds * qd[row + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |g| add_into(g, &dq));
        self.acc(grads, k, |g| add_into(g, &dk));
        self.acc(grads, v, |g| add_into(g, &dv));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, &d) in dst.iter_mut().zip(src) {
        *x += d;
    }
}
