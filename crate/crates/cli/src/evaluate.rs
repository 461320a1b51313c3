//! Evaluation of a checkpoint into a single JSON report.
//!
//! Every metric draws from its own stream of the eval seed, so two
//! checkpoints are compared on common random numbers and re-evaluating a
//! checkpoint reproduces its report exactly.

use crate::checkpoint::Checkpoint;
use crate::config::{Oracle, RunConfig};
use crate::pipeline::{self, load_heldout, load_models, load_train, Models};
use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use vapi_core::align::{reward, FrozenFeatureBank, RewardWeights};
use vapi_core::argen::ArParams;
use vapi_core::eval::kl::enumeration_size;
use vapi_core::eval::{
    class_probe_accuracy, codebook_usage, elbo_estimate, exact_log_marginal, exposure_bias_estimate, generate_images,
    recon_mse, teacher_forced_reward, toy_fid,
};
use vapi_core::synth::{ImageSample, NUM_CLASSES};
use vapi_core::tokenizer::TokenizerParams;
use vapi_core::{Image, SeededRng, TokenSeq};

const STREAM_TF_REWARD: u64 = 11;
const STREAM_GENERATE: u64 = 12;
const STREAM_EXPOSURE: u64 = 13;
const STREAM_ELBO: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub method: String,
    pub step: u64,
    /// PSNR of tokenizer reconstructions over the training set.
    pub train_psnr: f64,
    pub codebook_usage: usize,
    /// Tokenizer reconstructions of the held-out set against the held-out
    /// set: the toy-FID floor any generator is bounded by.
    pub recon_fid: f64,
    /// Training set against the held-out set: the sampling floor of the
    /// toy FID at these set sizes.
    pub real_fid: f64,
    pub generator: Option<GeneratorMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub train_nll: f64,
    /// Mean reward of decodes sampled on corrupted ground-truth contexts.
    pub tf_reward: f64,
    /// Mean reward of free-running samples against the closest held-out
    /// image of their class.
    pub free_reward: f64,
    pub toy_fid: f64,
    /// Mean nats per token.
    pub exposure_bias: f64,
    pub elbo_recon: f64,
    pub elbo_kl: f64,
    pub elbo: f64,
    /// Smallest `log p(I) - elbo` over the evaluated images, when enumerable.
    pub exact_min_slack: Option<f64>,
    pub exact_mean_log_marginal: Option<f64>,
    /// Linear probe trained on real features, scored on generated images.
    pub probe_accuracy: f64,
}

/// Up to `n` samples spread round-robin over classes from a class-major set.
pub fn class_balanced_subset(data: &[ImageSample], n: usize) -> Vec<ImageSample> {
    let per = data.len() / NUM_CLASSES;
    let mut out = Vec::with_capacity(n.min(data.len()));
    'outer: for j in 0..per {
        for c in 0..NUM_CLASSES {
            if out.len() == n {
                break 'outer;
            }
            out.push(data[c * per + j].clone());
        }
    }
    out
}

pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    let Models { tok, ar } = load_models(cfg, &ck)?;
    evaluate_models(cfg, &tok, ar.as_ref(), &ck.stage, &ck.method, ck.step)
}

pub fn evaluate_models(
    cfg: &RunConfig,
    tok: &TokenizerParams,
    ar: Option<&ArParams>,
    stage: &str,
    method: &str,
    step: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let e = &cfg.eval;
    let enumerable = enumeration_size(cfg.tokenizer.codebook_size, cfg.tokenizer_model().num_patches()).is_ok();
    if e.oracle == Oracle::Exact && !enumerable {
        bail!(
            "exact oracles requested but {}^{} token sequences are not enumerable; set eval.oracle = \"auto\" or \"off\"",
            cfg.tokenizer.codebook_size,
            cfg.tokenizer_model().num_patches()
        );
    }
    let bank = FrozenFeatureBank::new();
    let train = load_train(cfg)?;
    let heldout = load_heldout(cfg)?;
    let train_imgs: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let held_imgs: Vec<Image> = heldout.iter().map(|s| s.image.clone()).collect();
    let recon = tok.decode_batch(&tok.tokenize_batch(&held_imgs)?)?;
    let mut report = EvalReport {
        stage: stage.into(),
        method: method.into(),
        step,
        train_psnr: vapi_core::eval::psnr(recon_mse(tok, &train_imgs)?).min(999.0),
        codebook_usage: codebook_usage(tok, &train_imgs)?,
        recon_fid: toy_fid(&held_imgs, &recon, &bank)?,
        real_fid: toy_fid(&held_imgs, &train_imgs, &bank)?,
        generator: None,
    };
    let Some(ar) = ar else { return Ok(report) };

    let labels: Vec<usize> = train.iter().map(|s| s.label.id()).collect();
    let tokens: Vec<TokenSeq> = tok.tokenize_batch(&train_imgs)?;
    let train_nll = pipeline::mean_nll(ar, &labels, &tokens)?;

    let weights = RewardWeights::default();
    let reward_set = class_balanced_subset(&heldout, e.reward_images);
    let tf_reward = teacher_forced_reward(
        ar,
        tok,
        &bank,
        &reward_set,
        e.reward_xi,
        e.reward_group,
        weights,
        &mut SeededRng::new(e.seed, STREAM_TF_REWARD),
    )?;

    let gen_labels: Vec<usize> = (0..e.num_generated).map(|i| i % NUM_CLASSES).collect();
    let generated = generate_images(ar, tok, &gen_labels, e.temperature, &mut SeededRng::new(e.seed, STREAM_GENERATE))?;
    let fid = toy_fid(&held_imgs, &generated, &bank)?;
    let free_reward = nearest_reference_reward(&generated[..e.reward_images.min(generated.len())], &gen_labels, &heldout, weights, &bank)?;
    let gen_labels_used = &gen_labels[..generated.len()];
    let train_labels: Vec<usize> = train.iter().map(|s| s.label.id()).collect();
    let probe_accuracy = class_probe_accuracy(&bank, &train_imgs, &train_labels, &generated, gen_labels_used, NUM_CLASSES)?;

    let exposure_set = class_balanced_subset(&heldout, e.exposure_images);
    let exposure_bias =
        exposure_bias_estimate(ar, tok, &exposure_set, e.exposure_mc, &mut SeededRng::new(e.seed, STREAM_EXPOSURE))?;

    let elbo_set = class_balanced_subset(&heldout, e.elbo_images);
    let mut rng = SeededRng::new(e.seed, STREAM_ELBO);
    let run_exact = enumerable && e.oracle != Oracle::Off;
    let (mut recon_sum, mut kl_sum, mut lm_sum) = (0.0, 0.0, 0.0);
    let mut min_slack = f64::INFINITY;
    for s in &elbo_set {
        let r = elbo_estimate(ar, tok, s, e.sigma, e.elbo_mc, &mut rng)?;
        recon_sum += r.recon;
        kl_sum += r.kl;
        if run_exact {
            let lm = exact_log_marginal(ar, tok, s, e.sigma)?;
            lm_sum += lm;
            min_slack = min_slack.min(lm - r.elbo);
        }
    }
    let n = elbo_set.len() as f64;
    report.generator = Some(GeneratorMetrics {
        train_nll,
        tf_reward,
        free_reward,
        toy_fid: fid,
        exposure_bias,
        elbo_recon: recon_sum / n,
        elbo_kl: kl_sum / n,
        elbo: (recon_sum - kl_sum) / n,
        exact_min_slack: run_exact.then_some(min_slack),
        exact_mean_log_marginal: run_exact.then_some(lm_sum / n),
        probe_accuracy,
    });
    Ok(report)
}

/// Free-running samples have no paired reference; each is scored against
/// the held-out image of its class it matches best.
fn nearest_reference_reward(
    generated: &[Image],
    labels: &[usize],
    heldout: &[ImageSample],
    w: RewardWeights,
    bank: &FrozenFeatureBank,
) -> Result<f64> {
    let mut total = 0.0;
    for (img, &label) in generated.iter().zip(labels) {
        let mut best = f64::NEG_INFINITY;
        for s in heldout.iter().filter(|s| s.label.id() == label) {
            best = best.max(reward(img, &s.image, w, bank)?);
        }
        total += best;
    }
    Ok(total / generated.len().max(1) as f64)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    crate::metrics::write_json(path, report)
}
