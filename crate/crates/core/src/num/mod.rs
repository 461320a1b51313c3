//! Dense f64 tensors, a reverse-mode tape, seeded sampling and the
//! finite-difference gradient checker.

mod graph;
pub mod gradcheck;
pub mod linalg;
pub mod math;
pub mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_paths, GradCheckReport};
pub use graph::{Bound, Grads, Graph, Var};
pub use optim::{clip_grad_norm, AdamW};
pub use params::ParamStore;
pub use rng::{categorical_sample, mix64, RngState, SeededRng};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use alloc::vec::Vec;

/// Row-wise temperature-scaled softmax over the last axis.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig("softmax temperature must be positive".into()));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let k = logits.last_dim();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        out.extend(softmax_row(row, temperature));
    }
    Tensor::new(logits.shape(), out)
}

/// Softmax of a single row with max-subtraction.
pub fn softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&v| math::exp((v - max) / temperature)).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Row-wise log-softmax of a single row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|&v| math::exp(v - max)).sum();
    let lse = max + math::ln(total);
    row.iter().map(|&v| v - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log(sum(exp(values)))`, reduced in index order.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let total: f64 = values.iter().map(|&v| math::exp(v - max)).sum();
    max + math::ln(total)
}

/// KL divergence between two categorical distributions given as
/// probabilities. Terms with `p == 0` contribute nothing.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::AbsoluteContinuityViolated);
            }
            kl += pi * (math::ln(pi) - math::ln(qi));
        }
    }
    Ok(kl)
}

/// Mean over positions of `-log softmax(logits_t)[target_t]`, on a tape.
///
/// `logits` must be an `N x K` variable.
pub fn cross_entropy_seq(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    let rows = g.value(logits).numel() / k.max(1);
    if rows != targets.len() {
        return Err(Error::ShapeMismatch { expected: alloc::vec![targets.len(), k], found: shape });
    }
    let mut index = Vec::with_capacity(targets.len());
    for (t, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::TokenOutOfVocabulary { token: y, vocab: k });
        }
        index.push(Some(t * k + y));
    }
    let logp = g.log_softmax(logits);
    let picked = g.gather(logp, index, &[targets.len()]);
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}
