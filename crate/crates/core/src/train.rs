//! Pretraining steps for the tokenizer and the generator, plus the state
//! shared by every training loop.

use crate::align::FrozenFeatureBank;
use crate::argen::{nll_graph, ArParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{AdamW, Graph, ParamStore, SeededRng};
use crate::tokenizer::{tokenizer_loss_graph, TokenSeq, TokenizerLossParts, TokenizerParams};
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

/// Everything a loop needs besides the parameters: the step counter, the
/// optimizer moments and the sampling stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub opt: AdamW,
    pub rng: SeededRng,
}

impl TrainState {
    pub fn new(opt: AdamW, rng: SeededRng) -> Self {
        Self { step: 0, opt, rng }
    }
}

/// `batch` indices drawn uniformly with replacement from `0..n`.
pub fn sample_indices(rng: &mut SeededRng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}

/// Returns the gradient store or a divergence error if anything is not finite.
pub(crate) fn finite_grads(loss: f64, grads: ParamStore, step: u64) -> Result<ParamStore> {
    if !loss.is_finite() || grads.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Diverged { step });
    }
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerStepMetrics {
    pub loss: f64,
    pub parts: TokenizerLossParts,
    /// Distinct codes selected within the batch.
    pub batch_usage: usize,
}

/// One AdamW step on the full tokenizer loss.
pub fn tokenizer_train_step(
    tok: &mut TokenizerParams,
    state: &mut TrainState,
    bank: &FrozenFeatureBank,
    batch: &[Image],
) -> Result<TokenizerStepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = Graph::new();
    let b = g.bind(&tok.store, |p| state.opt.is_trainable(p));
    let out = tokenizer_loss_graph(&mut g, &b, &tok.cfg, bank, batch)?;
    let loss = g.value(out.total).item();
    let grads = g.backward(out.total);
    let grads = finite_grads(loss, b.gradients(&g, &grads), state.step)?;
    state.opt.step(&mut tok.store, &grads);
    state.step += 1;
    let usage = out.tokens.iter().flat_map(|s| s.as_slice().iter().copied()).collect::<BTreeSet<_>>().len();
    Ok(TokenizerStepMetrics { loss, parts: out.parts(&g), batch_usage: usage })
}

/// One AdamW step on the mean teacher-forced NLL of `(label, tokens)` pairs.
pub fn ar_pretrain_step(ar: &mut ArParams, state: &mut TrainState, labels: &[usize], targets: &[&TokenSeq]) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.bind(&ar.store, |p| state.opt.is_trainable(p));
    let loss_v = nll_graph(&mut g, &b, ar, labels, targets)?;
    let loss = g.value(loss_v).item();
    let grads = g.backward(loss_v);
    let grads = finite_grads(loss, b.gradients(&g, &grads), state.step)?;
    state.opt.step(&mut ar.store, &grads);
    state.step += 1;
    Ok(loss)
}

/// Paths of `store` whose name starts with one of `prefixes`.
pub fn paths_with_prefix(store: &ParamStore, prefixes: &[&str]) -> Vec<String> {
    store.paths().filter(|p| prefixes.iter().any(|q| p.starts_with(q))).map(String::from).collect()
}
