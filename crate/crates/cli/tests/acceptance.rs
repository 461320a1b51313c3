//! Acceptance suite: every criterion is measured at its stated tolerance and
//! reported as one PASS/FAIL line.
//!
//! The run always reports every criterion. It exits non-zero when a
//! criterion cannot be evaluated at all, and additionally on any FAIL when
//! `VAPI_ACCEPTANCE_STRICT=1`. Set `VAPI_ACCEPTANCE_KEEP=<dir>` to keep the
//! end-to-end run directories.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use vapi::config::{Method, RunConfig, Stage};
use vapi::evaluate::{EvalReport, GeneratorMetrics};
use vapi::metrics::{self, StageSummary, METRICS_FILE};
use vapi::pipeline::{self, Layout, TrainOptions, EVAL_FILE};
use vapi_core::align::{corrupt, group_advantages, CorruptionSpec, FrozenFeatureBank, RolloutGroup};
use vapi_core::argen::{nll_graph, ArConfig, ArParams};
use vapi_core::eval::kl::{kl_chain_check, ModelLaw};
use vapi_core::eval::{elbo_estimate, exact_log_marginal};
use vapi_core::num::{grad_check, grad_check_paths, AdamW, Bound, Graph, Var};
use vapi_core::synth::{make_dataset, DatasetSpec, ImageSample};
use vapi_core::tokenizer::{
    decode_graph, images_var, reconstruction_loss_graph, tokenizer_loss_graph, TokenizerConfig, TokenizerParams,
};
use vapi_core::train::TrainState;
use vapi_core::vapi::{
    prior_loss, prior_loss_graph, rollout_group, ste_loss_graph, vapi_objective, vapi_objective_graph, vapi_step,
    VapiConfig,
};
use vapi_core::{Image, SeededRng, Tensor, TokenSeq};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

/// Random tiny models with weights large enough that the token laws are
/// far from uniform.
fn random_pair(seed: u64, images: &[Image]) -> (TokenizerParams, ArParams) {
    let tok = TokenizerParams::init(TokenizerConfig::tiny(), &mut SeededRng::new(seed, 0), Some(images)).unwrap();
    (tok, random_ar(ArConfig::tiny(), seed))
}

fn random_ar(cfg: ArConfig, seed: u64) -> ArParams {
    let mut ar = ArParams::init(cfg, &mut SeededRng::new(seed, 1)).unwrap();
    let mut rng = SeededRng::new(seed, 2);
    for path in ["emb", "pos", "head.w"] {
        for v in ar.store.get_mut(path).unwrap().data_mut() {
            *v = rng.normal();
        }
    }
    ar
}

fn images(n_per_class: usize, seed: u64) -> Vec<ImageSample> {
    make_dataset(DatasetSpec { num_samples_per_class: n_per_class, base_seed: seed })
}

fn elbo_oracle() -> Result<Verdict> {
    let start = Instant::now();
    let data = images(3, 7);
    let init: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
    let mut min_slack = f64::INFINITY;
    let mut checks = 0;
    for draw in 0..20u64 {
        let (tok, ar) = random_pair(100 + draw, &init);
        let mut rng = SeededRng::new(draw, 7);
        for i in 0..5 {
            let s = &data[(draw as usize * 5 + i * 3) % data.len()];
            let lm = exact_log_marginal(&ar, &tok, s, 0.1)?;
            let est = elbo_estimate(&ar, &tok, s, 0.1, 16, &mut rng)?;
            min_slack = min_slack.min(lm - est.elbo);
            checks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(min_slack >= -1e-9 && secs < 60.0, format!("{checks} images, min slack {min_slack:.3e}, {secs:.1}s"))
}

fn kl_chain() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for pair in 0..20u64 {
        let p = random_ar(ArConfig::tiny(), 200 + 2 * pair);
        let q = random_ar(ArConfig::tiny(), 201 + 2 * pair);
        let label = pair as usize % 8;
        let r = kl_chain_check(&ModelLaw { ar: &p, label }, &ModelLaw { ar: &q, label })?;
        ensure!(r.joint > 0.0, "distinct models should have positive KL");
        worst = worst.max(r.abs_diff);
    }
    verdict(worst < 1e-10, format!("20 model pairs, max |joint - chained| {worst:.2e}"))
}

fn corruption_kernel() -> Result<Verdict> {
    const K: usize = 32;
    const POSITIONS: usize = 100_000;
    let mut rng = SeededRng::new(3, 0);
    let mut lines = Vec::new();
    let mut pass = true;
    for xi in [0.0, 0.25, 0.5, 0.95, 1.0] {
        let spec = CorruptionSpec::new(xi, K)?;
        let mut kept = 0usize;
        // Count of replacements by offset (replacement - original) mod K.
        let mut wrong = [0usize; K];
        for _ in 0..POSITIONS / 16 {
            let x = TokenSeq::new((0..16).map(|_| rng.below(K)).collect());
            let y = corrupt(&x, spec, &mut rng)?;
            for (&a, &b) in x.as_slice().iter().zip(y.as_slice()) {
                if a == b {
                    kept += 1;
                } else {
                    wrong[(b + K - a) % K] += 1;
                }
            }
        }
        let keep_rate = kept as f64 / POSITIONS as f64;
        let p = xi / (K - 1) as f64;
        let sigma = (POSITIONS as f64 * p * (1.0 - p)).sqrt();
        let max_z = wrong[1..]
            .iter()
            .map(|&c| if sigma > 0.0 { (c as f64 - POSITIONS as f64 * p).abs() / sigma } else if c == 0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max);
        pass &= (keep_rate - (1.0 - xi)).abs() <= 0.01 && max_z <= 3.0;
        lines.push(format!("xi={xi}: keep {keep_rate:.4}, max wrong-token z {max_z:.2}"));
    }
    verdict(pass, lines.join("; "))
}

fn group_of(seed: u64, ar: &ArParams, tok: &TokenizerParams, sample: &ImageSample, cfg: &VapiConfig) -> Result<RolloutGroup> {
    Ok(rollout_group(ar, tok, &FrozenFeatureBank::new(), sample, cfg, &mut SeededRng::new(seed, 5))?)
}

/// Moves the rollout log-probabilities off the current policy so that
/// ratios fall on both sides of the clip range.
fn shift_old(grp: &mut RolloutGroup, offsets: &[f64]) {
    let mut i = 0;
    for lp in &mut grp.old_logprobs {
        for v in lp.iter_mut() {
            *v += offsets[i % offsets.len()];
            i += 1;
        }
    }
}

fn gradient_checks() -> Result<Verdict> {
    let start = Instant::now();
    let data = images(1, 21);
    let init: Vec<Image> = images(2, 99).into_iter().map(|s| s.image).collect();
    let (tok, ar) = random_pair(5, &init);
    let bank = FrozenFeatureBank::new();
    let cfg = VapiConfig { group_size: 4, batch_size: 2, ..VapiConfig::default() };
    let h = 1e-4;
    let mut results: Vec<(&str, f64)> = Vec::new();

    let tcfg = TokenizerConfig::tiny();
    let img = vec![data[3].image.clone()];
    let r = grad_check(|g, b| Ok(tokenizer_loss_graph(g, b, &tcfg, &bank, &img)?.total), &tok.store, h)?;
    results.push(("tokenizer", r.max_rel_error));

    // The attention key bias shifts every score of a query equally, so its
    // true gradient is identically zero and a relative error on it compares
    // rounding noise. Generator checks skip it and assert its tape gradient
    // is zero instead.
    let mut bk = 0.0f64;
    let mut check_ar = |name: &'static str, f: &dyn Fn(&mut Graph, &Bound) -> vapi_core::Result<Var>| -> Result<()> {
        let r = grad_check_paths(f, &ar.store, h, |p| !p.ends_with("attn.bk"))?;
        let mut g = Graph::new();
        let b = g.bind(&ar.store, |_| true);
        let o = f(&mut g, &b)?;
        let grads = b.gradients(&g, &g.backward(o));
        bk = bk.max(grads.get("blk0.attn.bk").unwrap().data().iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        results.push((name, r.max_rel_error));
        Ok(())
    };

    let xs: Vec<TokenSeq> = tok.tokenize_batch(&[data[1].image.clone(), data[6].image.clone()])?;
    check_ar("ar-nll", &|g, b| nll_graph(g, b, &ar, &[1, 6], &[&xs[0], &xs[1]]))?;

    let noisy: Vec<TokenSeq> = xs
        .iter()
        .map(|x| corrupt(x, CorruptionSpec::new(0.5, 6).unwrap(), &mut SeededRng::new(5, 6)))
        .collect::<std::result::Result<_, _>>()?;
    check_ar("prior", &|g, b| prior_loss_graph(g, b, &ar, &[1, 6], &[&xs[0], &xs[1]], &[&noisy[0], &noisy[1]]))?;

    let batch: Vec<&ImageSample> = vec![&data[1], &data[6]];
    check_ar("ste", &|g, b| {
        let bt = g.bind(&tok.store, |_| false);
        Ok(ste_loss_graph(g, b, &bt, &ar, &tok, &bank, &batch, &[&xs[0], &xs[1]], &cfg)?.loss)
    })?;

    let mut g1 = group_of(5, &ar, &tok, &data[3], &cfg)?;
    let g2 = group_of(6, &ar, &tok, &data[6], &cfg)?;
    shift_old(&mut g1, &[0.05, -0.6, 0.02, 0.45]);
    check_ar("vapi", &|g, b| Ok(vapi_objective_graph(g, b, &ar, &[&g1, &g2], &cfg)?.objective))?;

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let parts: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(worst < 1e-4 && bk < 1e-12 && secs < 120.0, format!("max rel err: {}; key-bias grad {bk:.0e}; {secs:.1}s", parts.join(", ")))
}

fn advantage_normalization() -> Result<Verdict> {
    let mut rng = SeededRng::new(5, 0);
    let (mut max_mean, mut max_std_err, mut max_shift) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        // Rewards live in [-1, 0] at pixel scale; spreads vary over a decade.
        let scale = 10f64.powf(-rng.uniform());
        let rewards: Vec<f64> = (0..8).map(|_| -rng.uniform() * scale).collect();
        let a = group_advantages(&rewards, 5.0);
        let mean = a.iter().sum::<f64>() / 8.0;
        let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        max_mean = max_mean.max(mean.abs());
        max_std_err = max_std_err.max((std - 1.0).abs());
        let shift = 2.0 * rng.uniform() - 1.0;
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = group_advantages(&shifted, 5.0);
        max_shift = max_shift.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let constant_zero = [0.0, -0.3, -7.25].iter().all(|&c| group_advantages(&[c; 8], 5.0).iter().all(|&v| v == 0.0));
    let pass = max_mean < 1e-12 && max_std_err < 1e-9 && max_shift < 1e-12 && constant_zero;
    verdict(
        pass,
        format!("1000 groups: max |mean| {max_mean:.1e}, max |std-1| {max_std_err:.1e}, shift {max_shift:.1e}, constant groups zero: {constant_zero}"),
    )
}

fn on_policy_identity() -> Result<Verdict> {
    let data = images(1, 31);
    let init: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
    let (mut worst_sur, mut worst_obj) = (0.0f64, 0.0f64);
    for seed in 0..10u64 {
        let (tok, ar) = random_pair(300 + seed, &init);
        let cfg = VapiConfig::default();
        let grp = group_of(seed, &ar, &tok, &data[seed as usize % 8], &cfg)?;
        let o = vapi_objective(&ar, &grp, &cfg)?;
        let prior = prior_loss(&ar, grp.reference.label.id(), &grp.gt_tokens, &grp.noisy_tokens)?;
        worst_sur = worst_sur.max(o.surrogate.abs());
        worst_obj = worst_obj.max((o.objective + cfg.beta * prior).abs());
    }
    verdict(worst_sur < 1e-10 && worst_obj < 1e-10, format!("10 groups: max |surrogate| {worst_sur:.1e}, max |J + beta*L_prior| {worst_obj:.1e}"))
}

fn ste_contracts() -> Result<Verdict> {
    let data = images(1, 21);
    let init: Vec<Image> = images(2, 99).into_iter().map(|s| s.image).collect();
    let (tok, ar) = random_pair(11, &init);
    let bank = FrozenFeatureBank::new();
    let batch: Vec<&ImageSample> = data.iter().skip(1).take(3).collect();
    let imgs: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    let xs = tok.tokenize_batch(&imgs)?;
    let refs: Vec<&TokenSeq> = xs.iter().collect();
    let mut bitwise = true;
    let mut worst = 0.0f64;
    for tau in [1.0, 0.5] {
        let cfg = VapiConfig { ste_temperature: tau, ..VapiConfig::default() };
        let mut g = Graph::new();
        let ba = g.bind(&ar.store, |_| true);
        let bt = g.bind(&tok.store, |_| false);
        let v = ste_loss_graph(&mut g, &ba, &bt, &ar, &tok, &bank, &batch, &refs, &cfg)?;
        let hard = tok.decode_batch(&v.hard_tokens)?;
        let flat: Vec<f64> = hard.iter().flat_map(|im| im.pixels().iter().copied()).collect();
        bitwise &= g.value(v.decoded).data() == &flat[..];

        let grads = g.backward(v.loss);
        let dl = grads.get(v.logits).unwrap().to_vec();
        let soft = g.value(v.soft).clone();
        // Soft path: the gradient at the hard one-hots, pulled back through
        // the tempered softmax.
        let k = soft.last_dim();
        let mut onehot = vec![0.0; soft.numel()];
        for (r, t) in v.hard_tokens.iter().flat_map(|s| s.as_slice().iter().copied()).enumerate() {
            onehot[r * k + t] = 1.0;
        }
        let mut hg = Graph::new();
        let bt = hg.bind(&tok.store, |_| false);
        let y = hg.leaf(Tensor::new(soft.shape(), onehot).unwrap(), true);
        let emb = hg.matmul(y, bt.var("codebook"));
        let dec = decode_graph(&mut hg, &bt, &tok.cfg, emb);
        let target = images_var(&mut hg, &tok.cfg, &imgs)?;
        let (loss, _, _) = reconstruction_loss_graph(&mut hg, &bank, dec, target, 16, cfg.reward.lambda_p);
        let hgrads = hg.backward(loss);
        let u = hgrads.get(y).unwrap();
        for r in 0..soft.rows() {
            let s = soft.row(r);
            let ur = &u[r * k..(r + 1) * k];
            let dot: f64 = s.iter().zip(ur).map(|(a, b)| a * b).sum();
            for j in 0..k {
                worst = worst.max((dl[r * k + j] - s[j] * (ur[j] - dot) / tau).abs());
            }
        }
    }
    verdict(bitwise && worst < 1e-12, format!("forward bitwise equal: {bitwise}; max logit-gradient gap {worst:.1e}"))
}

fn efficiency_contract() -> Result<Verdict> {
    let data = images(4, 41);
    let init: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
    let tok = TokenizerParams::init(TokenizerConfig::default(), &mut SeededRng::new(9, 0), Some(&init))?;
    let mut ar = ArParams::init(ArConfig::default(), &mut SeededRng::new(9, 1))?;
    let bank = FrozenFeatureBank::new();
    let cfg = VapiConfig::default();
    let mut st = TrainState::new(AdamW::new(&ar.store, |_| true, cfg.lr, cfg.weight_decay), SeededRng::new(9, 2));
    let batch: Vec<&ImageSample> = data.iter().take(cfg.batch_size).collect();
    let mut pass = true;
    let mut detail = String::new();
    for step in 0..3 {
        ar.counter.reset();
        let m = vapi_step(&mut ar, &tok, &bank, &mut st, &batch, &cfg)?;
        let (calls, seqs) = (ar.counter.calls(), ar.counter.sequences());
        pass &= seqs == batch.len() as u64 && m.rollout_sequences == seqs && calls == 1 && m.snapshot_scalars == 0;
        if step == 0 {
            detail = format!(
                "{} groups of {}: {seqs} rollout sequence passes in {calls} batched call, snapshot scalars {}",
                batch.len(),
                cfg.group_size,
                m.snapshot_scalars
            );
        }
    }
    verdict(pass, detail)
}

struct EndToEnd {
    root: PathBuf,
    cfg: RunConfig,
    secs: f64,
}

fn default_config(root: &Path) -> Result<RunConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let mut cfg = RunConfig::load(&path)?;
    ensure!(cfg == RunConfig { out: cfg.out.clone(), ..RunConfig::default() }, "configs/default.toml drifted from the built-in defaults");
    cfg.seed = 0;
    cfg.out = root.to_path_buf();
    Ok(cfg)
}

fn end_to_end(root: &Path) -> Result<EndToEnd> {
    let cfg = default_config(root)?;
    let start = Instant::now();
    vapi::cli::run_all(&cfg, &[Method::Vapi])?;
    Ok(EndToEnd { root: root.to_path_buf(), cfg, secs: start.elapsed().as_secs_f64() })
}

fn eval_of(root: &Path, stage: Stage, method: Method) -> Result<EvalReport> {
    metrics::read_json(&Layout::new(root).stage_dir(stage, method).join(EVAL_FILE))
}

fn directional(run: &EndToEnd) -> Result<Verdict> {
    let base = eval_of(&run.root, Stage::ArPretrain, Method::Vapi)?;
    let post = eval_of(&run.root, Stage::Posttrain, Method::Vapi)?;
    let ar_summary: StageSummary =
        metrics::read_json(&Layout::new(&run.root).stage_dir(Stage::ArPretrain, Method::Vapi).join(metrics::SUMMARY_FILE))?;
    let nll = *ar_summary.values.get("train_nll").context("ar-pretrain summary has no train_nll")?;
    let b: &GeneratorMetrics = base.generator.as_ref().context("base report lacks generator metrics")?;
    let p: &GeneratorMetrics = post.generator.as_ref().context("post-train report lacks generator metrics")?;
    let c = &run.cfg;
    ensure!(
        c.tokenizer.steps == 2000 && c.ar.steps == 5000 && c.posttrain.steps == 200,
        "default schedule changed"
    );
    ensure!(c.posttrain.group_size == 8 && c.posttrain.beta == 0.1 && c.posttrain.xi == 0.5, "default VA-π settings changed");

    let psnr_ok = base.train_psnr >= 20.0;
    let nll_ok = nll < 1.5;
    let reward_gain = (p.tf_reward - b.tf_reward) / (0.0 - b.tf_reward);
    let fid_drop = (b.toy_fid - p.toy_fid) / b.toy_fid;
    let a = reward_gain >= 0.20;
    let bb = fid_drop >= 0.10;
    let cc = p.exposure_bias < b.exposure_bias;
    let time_ok = run.secs < 15.0 * 60.0;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    verdict(
        psnr_ok && nll_ok && a && bb && cc && time_ok,
        format!(
            "psnr {:.2} dB [{}]; nll {nll:.3} [{}]; (a) reward {:.4} -> {:.4}, {:.1}% of gap [{}]; (b) toy-fid {:.5} -> {:.5}, {:+.1}% [{}]; (c) exposure {:.4} -> {:.4} [{}]; wall {:.0}s [{}]",
            base.train_psnr,
            mark(psnr_ok),
            mark(nll_ok),
            b.tf_reward,
            p.tf_reward,
            100.0 * reward_gain,
            mark(a),
            b.toy_fid,
            p.toy_fid,
            -100.0 * fid_drop,
            mark(bb),
            b.exposure_bias,
            p.exposure_bias,
            mark(cc),
            run.secs,
            mark(time_ok)
        ),
    )
}

/// Every file a stage leaves that must not depend on the clock.
fn deterministic_files(root: &Path) -> Vec<PathBuf> {
    let layout = Layout::new(root);
    let mut files = vec![layout.train_data(), layout.heldout_data()];
    for (stage, method) in [(Stage::TokPretrain, Method::Vapi), (Stage::ArPretrain, Method::Vapi), (Stage::Posttrain, Method::Vapi)] {
        let dir = layout.stage_dir(stage, method);
        let mut ck: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map(|it| it.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "vapi")).collect())
            .unwrap_or_default();
        ck.sort();
        files.extend(ck);
        files.push(dir.join(METRICS_FILE));
        files.push(dir.join(metrics::SUMMARY_FILE));
    }
    files
}

fn compare_trees(a: &Path, b: &Path, files: &[PathBuf]) -> Result<usize> {
    for fa in files {
        let rel = fa.strip_prefix(a)?;
        let ba = std::fs::read(fa).with_context(|| format!("reading {}", fa.display()))?;
        let bb = std::fs::read(b.join(rel)).with_context(|| format!("reading {}", b.join(rel).display()))?;
        ensure!(ba == bb, "{} differs", rel.display());
    }
    Ok(files.len())
}

fn reproducibility(first: &EndToEnd, work: &Path) -> Result<Verdict> {
    let second = end_to_end(&work.join("repeat"))?;
    let files = deterministic_files(&first.root);
    let n = compare_trees(&first.root, &second.root, &files)?;
    for (stage, method) in [(Stage::ArPretrain, Method::Vapi), (Stage::Posttrain, Method::Vapi)] {
        ensure!(eval_of(&first.root, stage, method)? == eval_of(&second.root, stage, method)?, "{stage} eval differs");
    }

    // A third run is interrupted mid-way through every stage and resumed.
    let cfg = default_config(&work.join("resumed"))?;
    pipeline::gen_data(&cfg)?;
    let stops = [(Stage::TokPretrain, 1000), (Stage::ArPretrain, 2000), (Stage::Posttrain, 100)];
    for (stage, mid) in stops {
        let early = pipeline::train(&cfg, stage, Method::Vapi, TrainOptions { resume: false, stop_after: Some(mid) })?;
        ensure!(early.summary.is_none() && early.step == mid, "{stage} did not stop at {mid}");
        pipeline::train(&cfg, stage, Method::Vapi, TrainOptions { resume: true, stop_after: None })?;
    }
    let m = compare_trees(&first.root, &cfg.out, &files)?;
    verdict(true, format!("repeat run: {n} files bitwise equal, eval reports equal; resumed at 1000/2000/100 steps: {m} files bitwise equal"))
}

fn main() {
    let keep = std::env::var_os("VAPI_ACCEPTANCE_KEEP").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let work = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let strict = std::env::var("VAPI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut results: Vec<(u32, &str, Result<Verdict>)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Result<Verdict>| {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow::anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let line = match &out {
            Ok(v) => format!("criterion {n:>2} {}: {} ({}) [{:.1}s]", name, if v.pass { "PASS" } else { "FAIL" }, v.detail, start.elapsed().as_secs_f64()),
            Err(e) => format!("criterion {n:>2} {name}: FAIL (not evaluated: {e:#})"),
        };
        println!("{line}");
        results.push((n, name, out));
    };

    run(1, "elbo oracle", &mut elbo_oracle);
    run(2, "kl chain rule", &mut kl_chain);
    run(3, "corruption kernel", &mut corruption_kernel);
    run(4, "gradient checks", &mut gradient_checks);
    run(5, "advantage normalization", &mut advantage_normalization);
    run(6, "on-policy identity", &mut on_policy_identity);
    run(7, "straight-through contracts", &mut ste_contracts);

    let e2e = end_to_end(&work.join("first"));
    match &e2e {
        Ok(first) => {
            run(8, "end-to-end directional run", &mut || directional(first));
            run(9, "efficiency contract", &mut efficiency_contract);
            run(10, "reproducibility", &mut || reproducibility(first, &work));
        }
        Err(e) => {
            let msg = format!("{e:#}");
            run(8, "end-to-end directional run", &mut || Err(anyhow::anyhow!("{msg}")));
            run(9, "efficiency contract", &mut efficiency_contract);
            run(10, "reproducibility", &mut || Err(anyhow::anyhow!("{msg}")));
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| !matches!(&r.2, Ok(v) if v.pass)).map(|r| r.0).collect();
    let errored = results.iter().any(|r| r.2.is_err());
    println!("acceptance: {} of {} criteria pass{}", results.len() - failed.len(), results.len(), if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") });
    if errored || (strict && !failed.is_empty()) {
        std::process::exit(1);
    }
}
