//! Micro class-conditional causal transformer over token sequences.
//!
//! The input stream is `[class, BOS, x_0, .., x_{N-2}]` with learned
//! positional embeddings; the output row `t` is read from stream position
//! `t + 1` and predicts `x_t` from the class and `x_{<t}`. Blocks are pre-norm
//! with a GELU feed-forward layer.

use crate::error::{Error, Result};
use crate::num::{self, categorical_sample, math, Bound, Graph, ParamStore, SeededRng, Tensor, Var};
use crate::tokenizer::TokenSeq;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Replaces every prefix token by BOS, so predictions depend on the
    /// class and position only.
    pub ablate_context: bool,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self { vocab: 32, seq_len: 16, num_classes: 8, d_model: 32, layers: 2, heads: 2, ffn_mult: 4, ablate_context: false }
    }
}

impl ArConfig {
    /// Enumerable variant matching [`crate::tokenizer::TokenizerConfig::tiny`].
    pub fn tiny() -> Self {
        Self { vocab: 6, seq_len: 4, d_model: 8, layers: 1, ..Self::default() }
    }

    pub fn bos(&self) -> usize {
        self.vocab + self.num_classes
    }

    pub fn embedding_rows(&self) -> usize {
        self.vocab + self.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.seq_len == 0 || self.num_classes == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(String::from("generator sizes must be positive")));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(String::from("heads must divide the model width")));
        }
        Ok(())
    }
}

/// Instrumentation of forward passes.
#[derive(Clone, Debug, Default)]
pub struct ForwardCounter {
    calls: Cell<u64>,
    sequences: Cell<u64>,
}

impl ForwardCounter {
    /// Number of batched forward passes.
    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    /// Number of sequences pushed through the network, summed over calls.
    pub fn sequences(&self) -> u64 {
        self.sequences.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
        self.sequences.set(0);
    }

    fn record(&self, batch: usize) {
        self.calls.set(self.calls.get() + 1);
        self.sequences.set(self.sequences.get() + batch as u64);
    }
}

#[derive(Clone, Debug)]
pub struct ArParams {
    pub cfg: ArConfig,
    pub store: ParamStore,
    pub counter: ForwardCounter,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect()).unwrap()
}

impl ArParams {
    pub fn init(cfg: ArConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.d_model * cfg.ffn_mult);
        let inv = |n: usize| 1.0 / math::sqrt(n as f64);
        let mut s = ParamStore::new();
        s.insert("emb", normal_tensor(&[cfg.embedding_rows(), d], 0.02, rng));
        s.insert("pos", normal_tensor(&[cfg.seq_len + 1, d], 0.02, rng));
        for l in 0..cfg.layers {
            let p = |name: &str| format!("blk{l}.{name}");
            s.insert(p("ln1.g"), Tensor::filled(&[d], 1.0));
            s.insert(p("ln1.b"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                s.insert(p(&format!("attn.{w}")), normal_tensor(&[d, d], inv(d), rng));
                s.insert(p(&format!("attn.b{}", &w[1..])), Tensor::zeros(&[d]));
            }
            s.insert(p("ln2.g"), Tensor::filled(&[d], 1.0));
            s.insert(p("ln2.b"), Tensor::zeros(&[d]));
            s.insert(p("mlp.w1"), normal_tensor(&[d, f], inv(d), rng));
            s.insert(p("mlp.b1"), Tensor::zeros(&[f]));
            s.insert(p("mlp.w2"), normal_tensor(&[f, d], inv(f), rng));
            s.insert(p("mlp.b2"), Tensor::zeros(&[d]));
        }
        s.insert("ln_f.g", Tensor::filled(&[d], 1.0));
        s.insert("ln_f.b", Tensor::zeros(&[d]));
        s.insert("head.w", normal_tensor(&[d, cfg.vocab], 0.02, rng));
        s.insert("head.b", Tensor::zeros(&[cfg.vocab]));
        Ok(Self { cfg, store: s, counter: ForwardCounter::default() })
    }

    /// Every weight zero, layer-norm gains included: all logits vanish.
    pub fn zeros(cfg: ArConfig) -> Self {
        let mut p = Self::init(cfg, &mut SeededRng::new(0, 0)).expect("valid config");
        for (_, t) in p.store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Logits `[B*N, K]` for a batch, one pass.
    pub fn forward_batch(&self, labels: &[usize], prefixes: &[&TokenSeq]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, |_| false);
        let v = forward_graph(&mut g, &b, self, labels, prefixes)?;
        let t = g.value(v).clone();
        if !t.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(t)
    }

    /// `N x K` logits; row `t` conditions on the label and `prefix[..t]`.
    pub fn forward_logits(&self, label: usize, prefix: &TokenSeq) -> Result<Tensor> {
        self.forward_batch(&[label], &[prefix])
    }

    /// Alias of [`Self::forward_logits`] on a (possibly corrupted)
    /// ground-truth prefix. Its softmax rows are the factors of the
    /// teacher-forced posterior.
    pub fn teacher_forced_dist(&self, label: usize, gt_prefix: &TokenSeq) -> Result<Tensor> {
        self.forward_logits(label, gt_prefix)
    }

    /// Mean per-position negative log-likelihood of `targets`.
    pub fn nll(&self, label: usize, targets: &TokenSeq) -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(&self.store, |_| false);
        let v = nll_graph(&mut g, &b, self, &[label], &[targets])?;
        Ok(g.value(v).item())
    }

    /// Sum of log-softmax picks, i.e. `log pi(x | label)`.
    pub fn sequence_logprob(&self, label: usize, x: &TokenSeq) -> Result<f64> {
        let logits = self.forward_logits(label, x)?;
        Ok((0..x.len()).map(|t| num::log_softmax_row(logits.row(t))[x[t]]).sum())
    }

    pub fn sample_free_running(&self, label: usize, temperature: f64, rng: &mut SeededRng) -> Result<TokenSeq> {
        Ok(self.sample_free_running_batch(&[label], temperature, rng)?.pop().unwrap())
    }

    /// Sequential sampling for a batch of labels. Each step reruns the
    /// network on the partial sequences; unfilled positions hold token 0 and
    /// cannot influence earlier rows. Temperature 0 takes the argmax.
    pub fn sample_free_running_batch(&self, labels: &[usize], temperature: f64, rng: &mut SeededRng) -> Result<Vec<TokenSeq>> {
        if !(temperature >= 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be nonnegative, got {temperature}")));
        }
        let (n, k) = (self.cfg.seq_len, self.cfg.vocab);
        let mut seqs: Vec<Vec<usize>> = vec![vec![0; n]; labels.len()];
        for t in 0..n {
            let current: Vec<TokenSeq> = seqs.iter().map(|s| TokenSeq::new(s.clone())).collect();
            let refs: Vec<&TokenSeq> = current.iter().collect();
            let logits = self.forward_batch(labels, &refs)?;
            for (i, s) in seqs.iter_mut().enumerate() {
                let row = &logits.data()[(i * n + t) * k..(i * n + t + 1) * k];
                s[t] = sample_row(row, temperature, rng)?;
            }
        }
        Ok(seqs.into_iter().map(TokenSeq::new).collect())
    }
}

/// Draws from `softmax(row / temperature)`, or the argmax at temperature 0.
pub fn sample_row(row: &[f64], temperature: f64, rng: &mut SeededRng) -> Result<usize> {
    if temperature == 0.0 {
        return Ok(num::argmax(row));
    }
    categorical_sample(&num::softmax_row(row, temperature), rng)
}

/// One token per position, each drawn independently from its own row.
pub fn sample_positionwise(logits: &Tensor, temperature: f64, rng: &mut SeededRng) -> Result<TokenSeq> {
    (0..logits.rows()).map(|t| sample_row(logits.row(t), temperature, rng)).collect::<Result<Vec<_>>>().map(TokenSeq::new)
}

fn check_inputs(cfg: &ArConfig, labels: &[usize], seqs: &[&TokenSeq]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != seqs.len() {
        return Err(Error::ShapeMismatch { expected: vec![labels.len()], found: vec![seqs.len()] });
    }
    for (&l, s) in labels.iter().zip(seqs) {
        if l >= cfg.num_classes {
            return Err(Error::InvalidConfig(format!("class {l} out of range")));
        }
        if s.len() != cfg.seq_len {
            return Err(Error::ShapeMismatch { expected: vec![cfg.seq_len], found: vec![s.len()] });
        }
        s.validate(cfg.vocab)?;
    }
    Ok(())
}

/// Logits `[B*N, K]` on the tape; bumps the forward counter once.
pub fn forward_graph(g: &mut Graph, b: &Bound, ar: &ArParams, labels: &[usize], prefixes: &[&TokenSeq]) -> Result<Var> {
    let cfg = &ar.cfg;
    check_inputs(cfg, labels, prefixes)?;
    ar.counter.record(labels.len());
    let (n, batch) = (cfg.seq_len, labels.len());
    let len = n + 1;
    let mut ids = Vec::with_capacity(batch * len);
    for (&label, s) in labels.iter().zip(prefixes) {
        ids.push(cfg.vocab + label);
        ids.push(cfg.bos());
        for t in 0..n - 1 {
            ids.push(if cfg.ablate_context { cfg.bos() } else { s[t] });
        }
    }
    let tok = g.select_rows(b.var("emb"), &ids);
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let pos = g.select_rows(b.var("pos"), &pos_ids);
    let mut h = g.add(tok, pos);
    for l in 0..cfg.layers {
        let p = |name: &str| b.var(&format!("blk{l}.{name}"));
        let a = g.layer_norm(h, p("ln1.g"), p("ln1.b"));
        let q = g.linear(a, p("attn.wq"), p("attn.bq"));
        let k = g.linear(a, p("attn.wk"), p("attn.bk"));
        let v = g.linear(a, p("attn.wv"), p("attn.bv"));
        let att = g.causal_attention(q, k, v, batch, len, cfg.heads);
        let o = g.linear(att, p("attn.wo"), p("attn.bo"));
        h = g.add(h, o);
        let m = g.layer_norm(h, p("ln2.g"), p("ln2.b"));
        let f = g.linear(m, p("mlp.w1"), p("mlp.b1"));
        let f = g.gelu(f);
        let f = g.linear(f, p("mlp.w2"), p("mlp.b2"));
        h = g.add(h, f);
    }
    let hf = g.layer_norm(h, b.var("ln_f.g"), b.var("ln_f.b"));
    let out_rows: Vec<usize> = (0..batch).flat_map(|i| (1..len).map(move |j| i * len + j)).collect();
    let sel = g.select_rows(hf, &out_rows);
    Ok(g.linear(sel, b.var("head.w"), b.var("head.b")))
}

/// Mean negative log-likelihood over every position of the batch.
pub fn nll_graph(g: &mut Graph, b: &Bound, ar: &ArParams, labels: &[usize], targets: &[&TokenSeq]) -> Result<Var> {
    let logits = forward_graph(g, b, ar, labels, targets)?;
    let flat: Vec<usize> = targets.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    num::cross_entropy_seq(g, logits, &flat)
}
