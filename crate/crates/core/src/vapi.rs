//! Teacher-forced group-relative alignment of the generator to pixel space,
//! and the two reference post-training schemes: straight-through
//! fine-tuning of the generator and decoder-only tokenizer post-training.
//!
//! A VA-π rollout makes one teacher-forced pass of the generator over a
//! corrupted ground-truth sequence `x~*`, draws `G` sequences position by
//! position from the resulting rows, decodes them with the frozen tokenizer
//! and scores each against the reference image. The same pass provides the
//! clipped surrogate and the prior term, which scores the clean tokens `x*`
//! under the noisy context.

use crate::align::{corrupt, group_advantages, reward, CorruptionSpec, FrozenFeatureBank, RewardWeights, RolloutGroup};
use crate::argen::{forward_graph, sample_positionwise, ArParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{self, clip_grad_norm, Graph, ParamStore, SeededRng, Tensor, Var};
use crate::synth::ImageSample;
use crate::tokenizer::{decode_graph, decode_tokens_graph, images_var, reconstruction_loss_graph, TokenSeq, TokenizerParams};
use crate::train::{finite_grads, TrainState};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioGranularity {
    /// One ratio per token, the sequence advantage broadcast to every position.
    Token,
    /// One ratio per sequence: the product of its token ratios.
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardTarget {
    /// Score decodes against the reference image.
    Image,
    /// Score decodes against the decode of the corrupted context.
    NoisyDecode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VapiConfig {
    pub group_size: usize,
    pub beta: f64,
    pub clip_eps: f64,
    pub xi: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub max_adv_clip: f64,
    pub inner_epochs: usize,
    pub max_grad_norm: f64,
    pub ratio_granularity: RatioGranularity,
    pub reward_target: RewardTarget,
    pub reward: RewardWeights,
    /// Temperature of the teacher-forced rollout draws.
    pub sample_temperature: f64,
    /// Softmax temperature of the straight-through baseline.
    pub ste_temperature: f64,
}

impl Default for VapiConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.1,
            clip_eps: 0.2,
            xi: 0.5,
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 200,
            batch_size: 32,
            max_adv_clip: 5.0,
            inner_epochs: 1,
            max_grad_norm: 1.0,
            ratio_granularity: RatioGranularity::Token,
            reward_target: RewardTarget::Image,
            reward: RewardWeights::default(),
            sample_temperature: 1.0,
            ste_temperature: 1.0,
        }
    }
}

impl VapiConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return bad("group size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return bad("xi must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.inner_epochs == 0 {
            return bad("batch size and inner epochs must be positive");
        }
        if !(self.lr >= 0.0) || !(self.max_grad_norm > 0.0) || !(self.max_adv_clip > 0.0) {
            return bad("learning rate, gradient clip and advantage clip out of range");
        }
        if !(self.sample_temperature >= 0.0) || !(self.ste_temperature > 0.0) {
            return bad("temperatures out of range");
        }
        Ok(())
    }
}

/// Builds a group from the teacher-forced logits `[N, K]` of its context.
#[allow(clippy::too_many_arguments)]
pub fn group_from_logits(
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    sample: &ImageSample,
    gt_tokens: TokenSeq,
    noisy_tokens: TokenSeq,
    logits: &Tensor,
    cfg: &VapiConfig,
    rng: &mut SeededRng,
) -> Result<RolloutGroup> {
    if !logits.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let logp: Vec<Vec<f64>> = (0..logits.rows()).map(|t| num::log_softmax_row(logits.row(t))).collect();
    let mut samples = Vec::with_capacity(cfg.group_size);
    let mut old_logprobs = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let s = sample_positionwise(logits, cfg.sample_temperature, rng)?;
        old_logprobs.push((0..s.len()).map(|t| logp[t][s[t]]).collect());
        samples.push(s);
    }
    let decoded = tok.decode_batch(&samples)?;
    let target = match cfg.reward_target {
        RewardTarget::Image => sample.image.clone(),
        RewardTarget::NoisyDecode => tok.decode(&noisy_tokens)?,
    };
    let rewards = decoded.iter().map(|d| reward(d, &target, cfg.reward, bank)).collect::<Result<Vec<_>>>()?;
    let advantages = group_advantages(&rewards, cfg.max_adv_clip);
    Ok(RolloutGroup { reference: sample.clone(), gt_tokens, noisy_tokens, samples, old_logprobs, rewards, advantages })
}

/// One rollout group: tokenize, corrupt, one teacher-forced pass, `G` draws.
pub fn rollout_group(
    ar: &ArParams,
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    sample: &ImageSample,
    cfg: &VapiConfig,
    rng: &mut SeededRng,
) -> Result<RolloutGroup> {
    let x_star = tok.tokenize(&sample.image)?;
    let x_tilde = corrupt(&x_star, CorruptionSpec::new(cfg.xi, tok.cfg.codebook_size)?, rng)?;
    let logits = ar.teacher_forced_dist(sample.label.id(), &x_tilde)?;
    group_from_logits(tok, bank, sample, x_star, x_tilde, &logits, cfg, rng)
}

/// `-(1/N) sum_t log pi(x*_t | x~*_{<t})` on the tape, averaged over the batch.
pub fn prior_loss_graph(
    g: &mut Graph,
    b: &num::Bound,
    ar: &ArParams,
    labels: &[usize],
    x_stars: &[&TokenSeq],
    x_tildes: &[&TokenSeq],
) -> Result<Var> {
    let logits = forward_graph(g, b, ar, labels, x_tildes)?;
    prior_from_logits(g, logits, x_stars)
}

fn prior_from_logits(g: &mut Graph, logits: Var, x_stars: &[&TokenSeq]) -> Result<Var> {
    let flat: Vec<usize> = x_stars.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    num::cross_entropy_seq(g, logits, &flat)
}

pub fn prior_loss(ar: &ArParams, label: usize, x_star: &TokenSeq, x_tilde: &TokenSeq) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.bind(&ar.store, |_| false);
    let v = prior_loss_graph(&mut g, &b, ar, &[label], &[x_star], &[x_tilde])?;
    Ok(g.value(v).item())
}

/// Nodes of the objective, to be maximised.
pub struct ObjectiveVars {
    pub objective: Var,
    pub surrogate: Var,
    pub prior: Var,
    /// Fraction of ratios outside `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
}

/// Clipped surrogate minus `beta` times the prior loss, from the logits of
/// the groups' noisy contexts (`[B*N, K]`, groups in order).
pub fn objective_from_logits(g: &mut Graph, logits: Var, groups: &[&RolloutGroup], cfg: &VapiConfig) -> Result<ObjectiveVars> {
    let k = g.value(logits).last_dim();
    let n = groups[0].gt_tokens.len();
    let mut index = Vec::new();
    let mut old = Vec::new();
    let mut adv = Vec::new();
    for (i, grp) in groups.iter().enumerate() {
        if grp.old_logprobs.len() != grp.samples.len() || grp.advantages.len() != grp.samples.len() {
            return Err(Error::ShapeMismatch { expected: vec![grp.samples.len()], found: vec![grp.old_logprobs.len()] });
        }
        for (s, (lp, &a)) in grp.samples.iter().zip(grp.old_logprobs.iter().zip(&grp.advantages)) {
            for t in 0..n {
                index.push(Some((i * n + t) * k + s[t]));
            }
            old.extend_from_slice(lp);
            match cfg.ratio_granularity {
                RatioGranularity::Token => adv.extend(core::iter::repeat_n(a, n)),
                RatioGranularity::Sequence => adv.push(a),
            }
        }
    }
    let rows = index.len() / n;
    let logp = g.log_softmax(logits);
    let new = g.gather(logp, index, &[rows, n]);
    let old = g.constant(Tensor::new(&[rows, n], old).unwrap());
    let diff = g.sub(new, old);
    let diff = match cfg.ratio_granularity {
        RatioGranularity::Token => diff,
        RatioGranularity::Sequence => g.sum_last(diff),
    };
    let ratio = g.exp(diff);
    let a = g.constant(Tensor::from_vec(adv).reshaped(g.shape(ratio)).unwrap());
    let unclipped = g.mul(ratio, a);
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let clipped = g.mul(clipped, a);
    let m = g.minimum(unclipped, clipped);
    let surrogate = g.mean(m);
    let x_stars: Vec<&TokenSeq> = groups.iter().map(|grp| &grp.gt_tokens).collect();
    let prior = prior_from_logits(g, logits, &x_stars)?;
    let wp = g.scale(prior, cfg.beta);
    let objective = g.sub(surrogate, wp);
    let rv = g.value(ratio).data();
    let outside = rv.iter().filter(|&&r| (r - 1.0).abs() > cfg.clip_eps).count();
    Ok(ObjectiveVars { objective, surrogate, prior, clip_fraction: outside as f64 / rv.len() as f64 })
}

/// The objective for a batch of groups; one generator pass over their contexts.
pub fn vapi_objective_graph(g: &mut Graph, b: &num::Bound, ar: &ArParams, groups: &[&RolloutGroup], cfg: &VapiConfig) -> Result<ObjectiveVars> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let labels: Vec<usize> = groups.iter().map(|grp| grp.reference.label.id()).collect();
    let ctx: Vec<&TokenSeq> = groups.iter().map(|grp| &grp.noisy_tokens).collect();
    let logits = forward_graph(g, b, ar, &labels, &ctx)?;
    objective_from_logits(g, logits, groups, cfg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub surrogate: f64,
    pub prior: f64,
    pub clip_fraction: f64,
}

pub fn vapi_objective(ar: &ArParams, group: &RolloutGroup, cfg: &VapiConfig) -> Result<ObjectiveValue> {
    let mut g = Graph::new();
    let b = g.bind(&ar.store, |_| false);
    let o = vapi_objective_graph(&mut g, &b, ar, &[group], cfg)?;
    Ok(ObjectiveValue {
        objective: g.value(o.objective).item(),
        surrogate: g.value(o.surrogate).item(),
        prior: g.value(o.prior).item(),
        clip_fraction: o.clip_fraction,
    })
}

/// `pi_theta_old` as held during one rollout batch.
#[derive(Clone, Debug)]
pub enum PolicySnapshot {
    /// Only the per-token log-probabilities stored in the groups.
    StoredLogprobs,
    /// A frozen parameter copy, needed when several epochs reuse the rollouts.
    Params(ParamStore),
}

impl PolicySnapshot {
    /// Scalars held by the snapshot beyond the live parameters.
    pub fn scalars(&self) -> usize {
        match self {
            PolicySnapshot::StoredLogprobs => 0,
            PolicySnapshot::Params(p) => p.num_scalars(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VapiStepMetrics {
    pub mean_reward: f64,
    pub mean_prior: f64,
    pub surrogate: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
    /// Sequences the generator processed while building the rollouts.
    pub rollout_sequences: u64,
    /// Parameter scalars copied into a policy snapshot.
    pub snapshot_scalars: usize,
}

/// One VA-π update on a batch of reference samples. The tokenizer is only
/// read. On failure, parameters, optimizer and sampling stream are left as
/// they were.
pub fn vapi_step(
    ar: &mut ArParams,
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    state: &mut TrainState,
    batch: &[&ImageSample],
    cfg: &VapiConfig,
) -> Result<VapiStepMetrics> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let saved_rng = state.rng.clone();
    let out = vapi_step_inner(ar, tok, bank, state, batch, cfg);
    if out.is_err() {
        state.rng = saved_rng;
    }
    out
}

fn vapi_step_inner(
    ar: &mut ArParams,
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    state: &mut TrainState,
    batch: &[&ImageSample],
    cfg: &VapiConfig,
) -> Result<VapiStepMetrics> {
    let images: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    let x_stars = tok.tokenize_batch(&images)?;
    let spec = CorruptionSpec::new(cfg.xi, tok.cfg.codebook_size)?;
    let x_tildes = x_stars.iter().map(|x| corrupt(x, spec, &mut state.rng)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label.id()).collect();
    let ctx: Vec<&TokenSeq> = x_tildes.iter().collect();
    let n = ar.cfg.seq_len;
    let k = ar.cfg.vocab;
    let seq_before = ar.counter.sequences();

    let make_groups = |logits: &Tensor, rng: &mut SeededRng| -> Result<Vec<RolloutGroup>> {
        let mut groups = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let rows = Tensor::new(&[n, k], logits.data()[i * n * k..(i + 1) * n * k].to_vec()).unwrap();
            groups.push(group_from_logits(tok, bank, s, x_stars[i].clone(), x_tildes[i].clone(), &rows, cfg, rng)?);
        }
        Ok(groups)
    };

    let mut metrics = VapiStepMetrics::default();
    if cfg.inner_epochs == 1 {
        // The rollout pass doubles as the differentiable pass: with one
        // epoch the old policy is the current one, so only its stored
        // log-probabilities are needed.
        let snapshot = PolicySnapshot::StoredLogprobs;
        let mut g = Graph::new();
        let b = g.bind(&ar.store, |p| state.opt.is_trainable(p));
        let logits = forward_graph(&mut g, &b, ar, &labels, &ctx)?;
        let groups = make_groups(g.value(logits), &mut state.rng)?;
        metrics.rollout_sequences = ar.counter.sequences() - seq_before;
        let refs: Vec<&RolloutGroup> = groups.iter().collect();
        let o = objective_from_logits(&mut g, logits, &refs, cfg)?;
        let loss = g.scale(o.objective, -1.0);
        update(ar, state, &g, &b, loss, cfg, &mut metrics)?;
        fill_metrics(&mut metrics, &g, &o, &groups, snapshot.scalars());
    } else {
        // Several epochs reuse the rollouts, so the old policy must outlive
        // the first update.
        let old = ar.clone();
        let logits = old.forward_batch(&labels, &ctx)?;
        ar.counter = old.counter.clone();
        let snapshot = PolicySnapshot::Params(old.store);
        let groups = make_groups(&logits, &mut state.rng)?;
        metrics.rollout_sequences = ar.counter.sequences() - seq_before;
        let refs: Vec<&RolloutGroup> = groups.iter().collect();
        for _ in 0..cfg.inner_epochs {
            let mut g = Graph::new();
            let b = g.bind(&ar.store, |p| state.opt.is_trainable(p));
            let o = vapi_objective_graph(&mut g, &b, ar, &refs, cfg)?;
            let loss = g.scale(o.objective, -1.0);
            update(ar, state, &g, &b, loss, cfg, &mut metrics)?;
            fill_metrics(&mut metrics, &g, &o, &groups, snapshot.scalars());
        }
    }
    Ok(metrics)
}

fn update(
    ar: &mut ArParams,
    state: &mut TrainState,
    g: &Graph,
    b: &num::Bound,
    loss: Var,
    cfg: &VapiConfig,
    metrics: &mut VapiStepMetrics,
) -> Result<()> {
    let grads = g.backward(loss);
    let mut grads = finite_grads(g.value(loss).item(), b.gradients(g, &grads), state.step)?;
    metrics.grad_norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
    state.opt.step(&mut ar.store, &grads);
    state.step += 1;
    Ok(())
}

fn fill_metrics(m: &mut VapiStepMetrics, g: &Graph, o: &ObjectiveVars, groups: &[RolloutGroup], snapshot: usize) {
    let count = groups.iter().map(|grp| grp.rewards.len()).sum::<usize>() as f64;
    m.mean_reward = groups.iter().flat_map(|grp| grp.rewards.iter()).sum::<f64>() / count;
    m.mean_abs_advantage = groups.iter().flat_map(|grp| grp.advantages.iter()).map(|a| a.abs()).sum::<f64>() / count;
    m.mean_prior = g.value(o.prior).item();
    m.surrogate = g.value(o.surrogate).item();
    m.objective = g.value(o.objective).item();
    m.clip_fraction = o.clip_fraction;
    m.snapshot_scalars = snapshot;
}

/// Nodes of the straight-through objective.
pub struct SteVars {
    pub loss: Var,
    pub logits: Var,
    pub soft: Var,
    pub hard_tokens: Vec<TokenSeq>,
    pub decoded: Var,
    pub mse: Var,
    pub perceptual: Var,
}

/// Teacher-forced logits on the clean tokens, `softmax(l / tau)` relaxed
/// one-hots passed straight through their argmax, embedded against the
/// codebook, decoded, and scored by `MSE + lambda_p * L_p`.
#[allow(clippy::too_many_arguments)]
pub fn ste_loss_graph(
    g: &mut Graph,
    b_ar: &num::Bound,
    b_tok: &num::Bound,
    ar: &ArParams,
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    batch: &[&ImageSample],
    x_stars: &[&TokenSeq],
    cfg: &VapiConfig,
) -> Result<SteVars> {
    let labels: Vec<usize> = batch.iter().map(|s| s.label.id()).collect();
    let logits = forward_graph(g, b_ar, ar, &labels, x_stars)?;
    let soft = g.softmax(logits, cfg.ste_temperature);
    let k = ar.cfg.vocab;
    let (hard, tokens) = {
        let sv = g.value(soft);
        let mut hard = vec![0.0; sv.numel()];
        let mut tokens = Vec::with_capacity(sv.rows());
        for r in 0..sv.rows() {
            let t = num::argmax(sv.row(r));
            hard[r * k + t] = 1.0;
            tokens.push(t);
        }
        (Tensor::new(sv.shape(), hard).unwrap(), tokens)
    };
    let y = g.straight_through(soft, hard);
    let emb = g.matmul(y, b_tok.var("codebook"));
    let decoded = decode_graph(g, b_tok, &tok.cfg, emb);
    let images: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    let target = images_var(g, &tok.cfg, &images)?;
    let (loss, mse, perceptual) = reconstruction_loss_graph(g, bank, decoded, target, tok.cfg.image_side, cfg.reward.lambda_p);
    let n = ar.cfg.seq_len;
    let hard_tokens = tokens.chunks(n).map(|c| TokenSeq::new(c.to_vec())).collect();
    Ok(SteVars { loss, logits, soft, hard_tokens, decoded, mse, perceptual })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineStepMetrics {
    pub loss: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub grad_norm: f64,
    /// Largest gradient magnitude reaching a frozen parameter.
    pub frozen_grad_max: f64,
}

/// One straight-through fine-tuning step of the generator.
pub fn ste_finetune_step(
    ar: &mut ArParams,
    tok: &TokenizerParams,
    bank: &FrozenFeatureBank,
    state: &mut TrainState,
    batch: &[&ImageSample],
    cfg: &VapiConfig,
) -> Result<BaselineStepMetrics> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let images: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    let x_stars = tok.tokenize_batch(&images)?;
    let refs: Vec<&TokenSeq> = x_stars.iter().collect();
    let mut g = Graph::new();
    let b_ar = g.bind(&ar.store, |p| state.opt.is_trainable(p));
    let b_tok = g.bind(&tok.store, |_| false);
    let v = ste_loss_graph(&mut g, &b_ar, &b_tok, ar, tok, bank, batch, &refs, cfg)?;
    let grads = g.backward(v.loss);
    let frozen_grad_max = b_tok.gradients(&g, &grads).max_abs();
    let mut ar_grads = finite_grads(g.value(v.loss).item(), b_ar.gradients(&g, &grads), state.step)?;
    let grad_norm = clip_grad_norm(&mut ar_grads, cfg.max_grad_norm);
    state.opt.step(&mut ar.store, &ar_grads);
    state.step += 1;
    Ok(BaselineStepMetrics {
        loss: g.value(v.loss).item(),
        mse: g.value(v.mse).item(),
        perceptual: g.value(v.perceptual).item(),
        grad_norm,
        frozen_grad_max,
    })
}

/// Decoder-only parameters, the trainable set of tokenizer post-training.
pub fn is_decoder_path(path: &str) -> bool {
    path.starts_with("dec.")
}

/// One decoder post-training step: tokens are drawn from the frozen
/// generator's teacher-forced rows on the clean prefix, decoded, and scored
/// by `MSE + lambda_p * L_p`. Only paths owned by the optimizer move.
pub fn tokenizer_posttrain_step(
    ar: &ArParams,
    tok: &mut TokenizerParams,
    bank: &FrozenFeatureBank,
    state: &mut TrainState,
    batch: &[&ImageSample],
    cfg: &VapiConfig,
) -> Result<BaselineStepMetrics> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let images: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    let x_stars = tok.tokenize_batch(&images)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label.id()).collect();
    let refs: Vec<&TokenSeq> = x_stars.iter().collect();
    let logits = ar.forward_batch(&labels, &refs)?;
    let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
    let mut rng = state.rng.clone();
    let mut samples = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let rows = Tensor::new(&[n, k], logits.data()[i * n * k..(i + 1) * n * k].to_vec()).unwrap();
        samples.push(sample_positionwise(&rows, cfg.sample_temperature, &mut rng)?);
    }
    let mut g = Graph::new();
    let b = g.bind(&tok.store, |p| state.opt.is_trainable(p));
    let decoded = decode_tokens_graph(&mut g, &b, &tok.cfg, &samples)?;
    let target = images_var(&mut g, &tok.cfg, &images)?;
    let (loss, mse, perceptual) = reconstruction_loss_graph(&mut g, bank, decoded, target, tok.cfg.image_side, cfg.reward.lambda_p);
    let grads = g.backward(loss);
    let all = b.gradients(&g, &grads);
    let frozen_grad_max = all.filtered(|p| !state.opt.is_trainable(p)).max_abs();
    let mut grads = finite_grads(g.value(loss).item(), all, state.step)?;
    let grad_norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
    state.opt.step(&mut tok.store, &grads);
    state.step += 1;
    state.rng = rng;
    Ok(BaselineStepMetrics {
        loss: g.value(loss).item(),
        mse: g.value(mse).item(),
        perceptual: g.value(perceptual).item(),
        grad_norm,
        frozen_grad_max,
    })
}
