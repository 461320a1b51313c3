//! Metrics and brute-force oracles: pixel likelihood, ELBO, exposure bias,
//! the KL chain rule, toy FID, reconstruction diagnostics and a linear probe.

pub mod elbo;
pub mod fid;
pub mod kl;
pub mod probe;

pub use elbo::{elbo_estimate, exact_elbo, exact_log_marginal, exact_log_marginal_tree, exposure_bias_estimate, exposure_bias_samples, ElboReport};
pub use fid::{toy_fid, FeatureStats};
pub use kl::{kl_chain_check, KlChainReport, ModelLaw, SequenceLaw, TableLaw, TeacherForcedLaw};
pub use probe::{class_probe_accuracy, LinearProbe};

use crate::align::{corrupt, reward, CorruptionSpec, FrozenFeatureBank, RewardWeights};
use crate::argen::{sample_positionwise, ArParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{math, SeededRng, Tensor};
use crate::synth::ImageSample;
use crate::tokenizer::{TokenSeq, TokenizerParams};
use alloc::collections::BTreeSet;
use alloc::vec::Vec;

/// Default likelihood width of the pixel density.
pub const DEFAULT_SIGMA: f64 = 0.1;

/// Isotropic Gaussian log-density of `image` around `decoded`:
/// `-|I - I^|^2 / (2 sigma^2) - (P/2) ln(2 pi sigma^2)`.
pub fn pixel_loglik(image: &Image, decoded: &Image, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("sigma must be positive, got {sigma}")));
    }
    image.check_same_shape(decoded)?;
    let sse: f64 = image.pixels().iter().zip(decoded.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    let p = image.pixels().len() as f64;
    Ok(-sse / (2.0 * sigma * sigma) - 0.5 * p * math::ln(2.0 * core::f64::consts::PI * sigma * sigma))
}

/// `10 log10(1 / mse)` for peak 1; `+inf` at zero error.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * math::log10(1.0 / mse)
    }
}

/// Mean reconstruction MSE over `images`.
pub fn recon_mse(tok: &TokenizerParams, images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let seqs = tok.tokenize_batch(images)?;
    let rec = tok.decode_batch(&seqs)?;
    let mut total = 0.0;
    for (a, b) in images.iter().zip(&rec) {
        total += a.mse(b)?;
    }
    Ok(total / images.len() as f64)
}

/// PSNR of the mean reconstruction MSE over `images`.
pub fn recon_psnr(tok: &TokenizerParams, images: &[Image]) -> Result<f64> {
    Ok(psnr(recon_mse(tok, images)?))
}

/// Distinct codes the quantizer selects over `images`.
pub fn codebook_usage(tok: &TokenizerParams, images: &[Image]) -> Result<usize> {
    let seqs = tok.tokenize_batch(images)?;
    Ok(seqs.iter().flat_map(|s| s.as_slice().iter().copied()).collect::<BTreeSet<_>>().len())
}

/// Mean reward of `group_size` teacher-forced draws per reference, each
/// drawn from the rows the generator produces on a corrupted context.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_reward(
    ar: &ArParams,
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    dataset: &[ImageSample],
    xi: f64,
    group_size: usize,
    weights: RewardWeights,
    rng: &mut SeededRng,
) -> Result<f64> {
    if dataset.is_empty() || group_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let images: Vec<Image> = dataset.iter().map(|s| s.image.clone()).collect();
    let spec = CorruptionSpec::new(xi, tok.cfg.codebook_size)?;
    let ctx = tok.tokenize_batch(&images)?.iter().map(|x| corrupt(x, spec, rng)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = dataset.iter().map(|s| s.label.id()).collect();
    let refs: Vec<&TokenSeq> = ctx.iter().collect();
    let logits = ar.forward_batch(&labels, &refs)?;
    let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let rows = Tensor::new(&[n, k], logits.data()[i * n * k..(i + 1) * n * k].to_vec()).unwrap();
        let xs = (0..group_size).map(|_| sample_positionwise(&rows, 1.0, rng)).collect::<Result<Vec<_>>>()?;
        for d in tok.decode_batch(&xs)? {
            total += reward(&d, img, weights, bank)?;
        }
    }
    Ok(total / (images.len() * group_size) as f64)
}

/// Free-running samples for each label, decoded.
pub fn generate_images(ar: &ArParams, tok: &TokenizerParams, labels: &[usize], temperature: f64, rng: &mut SeededRng) -> Result<Vec<Image>> {
    let seqs = ar.sample_free_running_batch(labels, temperature, rng)?;
    tok.decode_batch(&seqs)
}
