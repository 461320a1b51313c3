//! The evidence lower bound on the pixel log marginal, its Monte-Carlo
//! estimate, the exact value by enumeration, and the exposure-bias estimate
//! that shares its KL term.
//!
//! The posterior is the teacher-forced law `q(x | I) = prod_t pi(x_t | x*_{<t})`
//! with `x*` the tokenization of `I`; the prior is the free-running law of
//! the generator; the likelihood is an isotropic Gaussian around the decode.

use super::kl::{enumeration_size, sequence_at};
use super::pixel_loglik;
use crate::argen::{sample_positionwise, ArParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{self, categorical_kl, log_sum_exp, SeededRng, Tensor};
use crate::synth::ImageSample;
use crate::tokenizer::{TokenSeq, TokenizerParams};
use alloc::vec::Vec;

/// Sequences per generator pass during enumeration.
const ENUM_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
    pub log_marginal: Option<f64>,
    /// `log_marginal - elbo` when the marginal is known.
    pub slack: Option<f64>,
}

impl ElboReport {
    fn new(recon: f64, kl: f64) -> Self {
        Self { recon, kl, elbo: recon - kl, log_marginal: None, slack: None }
    }

    pub fn with_log_marginal(mut self, lm: f64) -> Self {
        self.log_marginal = Some(lm);
        self.slack = Some(lm - self.elbo);
        self
    }
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| num::softmax_row(t.row(r), 1.0)).collect()
}

fn row_block(t: &Tensor, i: usize, n: usize) -> Tensor {
    let k = t.last_dim();
    Tensor::new(&[n, k], t.data()[i * n * k..(i + 1) * n * k].to_vec()).unwrap()
}

/// Per-position KLs `KL(q_t || pi(. | x_{<t}))` along each of `xs`.
fn kl_along(ar: &ArParams, label: usize, q: &[Vec<f64>], xs: &[TokenSeq]) -> Result<Vec<f64>> {
    let labels = alloc::vec![label; xs.len()];
    let refs: Vec<&TokenSeq> = xs.iter().collect();
    let logits = ar.forward_batch(&labels, &refs)?;
    let n = ar.cfg.seq_len;
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let p = softmax_rows(&row_block(&logits, i, n));
        let mut kl = 0.0;
        for t in 0..n {
            kl += categorical_kl(&q[t], &p[t])?;
        }
        out.push(kl);
    }
    Ok(out)
}

/// Monte-Carlo ELBO: the reconstruction term averages `log p(I | x)` over
/// `num_mc` draws from the posterior, and the KL term averages, along the
/// same draws, the exact per-position categorical KLs.
pub fn elbo_estimate(
    ar: &ArParams,
    tok: &TokenizerParams,
    sample: &ImageSample,
    sigma: f64,
    num_mc: usize,
    rng: &mut SeededRng,
) -> Result<ElboReport> {
    if num_mc == 0 {
        return Err(Error::EmptyBatch);
    }
    let label = sample.label.id();
    let x_star = tok.tokenize(&sample.image)?;
    let tf = ar.teacher_forced_dist(label, &x_star)?;
    let q = softmax_rows(&tf);
    let xs = (0..num_mc).map(|_| sample_positionwise(&tf, 1.0, rng)).collect::<Result<Vec<_>>>()?;
    let decoded = tok.decode_batch(&xs)?;
    let mut recon = 0.0;
    for d in &decoded {
        recon += pixel_loglik(&sample.image, d, sigma)?;
    }
    let kl = kl_along(ar, label, &q, &xs)?.iter().sum::<f64>();
    Ok(ElboReport::new(recon / num_mc as f64, kl / num_mc as f64))
}

/// Log-probability under the free-running law, and the decode, of every
/// sequence in lexicographic order.
fn enumerate_joint(ar: &ArParams, tok: &TokenizerParams, label: usize) -> Result<(Vec<f64>, Vec<Image>)> {
    let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
    let total = enumeration_size(k, n)?;
    let mut logp = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + ENUM_CHUNK).min(total);
        let xs: Vec<TokenSeq> = (start..end).map(|i| TokenSeq::new(sequence_at(i, k, n))).collect();
        let refs: Vec<&TokenSeq> = xs.iter().collect();
        let logits = ar.forward_batch(&alloc::vec![label; xs.len()], &refs)?;
        for (i, x) in xs.iter().enumerate() {
            let mut lp = 0.0;
            for t in 0..n {
                let row = logits.row(i * n + t);
                lp += row[x[t]] - log_sum_exp(row);
            }
            logp.push(lp);
        }
        images.extend(tok.decode_batch(&xs)?);
        start = end;
    }
    let mass = log_sum_exp(&logp);
    if mass.abs() > 1e-9 {
        return Err(Error::UnnormalizedDistribution { total: num::math::exp(mass) });
    }
    Ok((logp, images))
}

/// `log sum_x pi(x) p(I | x)` over all `K^N` sequences.
pub fn exact_log_marginal(ar: &ArParams, tok: &TokenizerParams, sample: &ImageSample, sigma: f64) -> Result<f64> {
    let (logp, images) = enumerate_joint(ar, tok, sample.label.id())?;
    let mut terms = Vec::with_capacity(logp.len());
    for (lp, d) in logp.iter().zip(&images) {
        terms.push(lp + pixel_loglik(&sample.image, d, sigma)?);
    }
    Ok(log_sum_exp(&terms))
}

/// The same marginal by a depth-first walk of the prefix tree, one
/// conditional per node and one decode per leaf, accumulated in reverse
/// lexicographic order. Independent of [`exact_log_marginal`].
pub fn exact_log_marginal_tree(ar: &ArParams, tok: &TokenizerParams, sample: &ImageSample, sigma: f64) -> Result<f64> {
    let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
    enumeration_size(k, n)?;
    let label = sample.label.id();
    let mut terms = Vec::new();
    #[allow(clippy::too_many_arguments)]
    fn walk(
        ar: &ArParams,
        tok: &TokenizerParams,
        image: &Image,
        label: usize,
        sigma: f64,
        prefix: &mut Vec<usize>,
        logp: f64,
        terms: &mut Vec<f64>,
    ) -> Result<()> {
        let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
        if prefix.len() == n {
            let x = TokenSeq::new(prefix.clone());
            terms.push(logp + pixel_loglik(image, &tok.decode(&x)?, sigma)?);
            return Ok(());
        }
        let mut padded = prefix.clone();
        padded.resize(n, 0);
        let logits = ar.forward_logits(label, &TokenSeq::new(padded))?;
        let row = num::log_softmax_row(logits.row(prefix.len()));
        for tok_id in (0..k).rev() {
            prefix.push(tok_id);
            walk(ar, tok, image, label, sigma, prefix, logp + row[tok_id], terms)?;
            prefix.pop();
        }
        Ok(())
    }
    walk(ar, tok, &sample.image, label, sigma, &mut Vec::new(), 0.0, &mut terms)?;
    Ok(log_sum_exp(&terms))
}

/// The ELBO with both terms computed exactly by enumeration, together
/// with the exact log marginal.
pub fn exact_elbo(ar: &ArParams, tok: &TokenizerParams, sample: &ImageSample, sigma: f64) -> Result<ElboReport> {
    let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
    let label = sample.label.id();
    let (logp, images) = enumerate_joint(ar, tok, label)?;
    let x_star = tok.tokenize(&sample.image)?;
    let q = softmax_rows(&ar.teacher_forced_dist(label, &x_star)?);
    let mut recon = 0.0;
    let mut kl = 0.0;
    let mut joint = Vec::with_capacity(logp.len());
    for (i, (lp, d)) in logp.iter().zip(&images).enumerate() {
        let x = sequence_at(i, k, n);
        let ll = pixel_loglik(&sample.image, d, sigma)?;
        joint.push(lp + ll);
        let qx: f64 = (0..n).map(|t| q[t][x[t]]).product();
        if qx > 0.0 {
            recon += qx * ll;
            kl += qx * (num::math::ln(qx) - lp);
        }
    }
    Ok(ElboReport::new(recon, kl).with_log_marginal(log_sum_exp(&joint)))
}

/// Per-sequence exposure bias in nats per token: for each reference and
/// each draw `x ~ q`, `(1/N) sum_t KL(pi(.|x*_{<t}) || pi(.|x_{<t}))`.
pub fn exposure_bias_samples(
    ar: &ArParams,
    tok: &TokenizerParams,
    dataset: &[ImageSample],
    num_prefix_mc: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if dataset.is_empty() || num_prefix_mc == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = ar.cfg.seq_len as f64;
    let images: Vec<Image> = dataset.iter().map(|s| s.image.clone()).collect();
    let x_stars = tok.tokenize_batch(&images)?;
    let labels: Vec<usize> = dataset.iter().map(|s| s.label.id()).collect();
    let refs: Vec<&TokenSeq> = x_stars.iter().collect();
    let tf = ar.forward_batch(&labels, &refs)?;
    let mut out = Vec::with_capacity(dataset.len() * num_prefix_mc);
    for (i, &label) in labels.iter().enumerate() {
        let rows = row_block(&tf, i, ar.cfg.seq_len);
        let q = softmax_rows(&rows);
        let xs = (0..num_prefix_mc).map(|_| sample_positionwise(&rows, 1.0, rng)).collect::<Result<Vec<_>>>()?;
        out.extend(kl_along(ar, label, &q, &xs)?.into_iter().map(|v| v / n));
    }
    Ok(out)
}

/// Mean of [`exposure_bias_samples`].
pub fn exposure_bias_estimate(
    ar: &ArParams,
    tok: &TokenizerParams,
    dataset: &[ImageSample],
    num_prefix_mc: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let s = exposure_bias_samples(ar, tok, dataset, num_prefix_mc, rng)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
