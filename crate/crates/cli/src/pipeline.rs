//! Stage orchestration: data generation, the three training stages and
//! their checkpoints.
//!
//! Output layout under `out`:
//!
//! ```text
//! data/train.vapd, data/heldout.vapd
//! tok-pretrain/   ckpt-NNNNNN.vapi, final.vapi, metrics.jsonl, timing.jsonl, summary.json, wall.json
//! ar-pretrain/    same, plus eval.json once evaluated
//! posttrain-<method>/  same
//! ```

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Method, RunConfig, Stage};
use crate::data;
use crate::metrics::{self, MetricLog, MetricRecord, StageSummary, WallClock};
use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use vapi_core::align::FrozenFeatureBank;
use vapi_core::argen::ArParams;
use vapi_core::eval::{psnr, recon_mse, codebook_usage};
use vapi_core::num::AdamW;
use vapi_core::synth::ImageSample;
use vapi_core::tokenizer::TokenizerParams;
use vapi_core::train::{ar_pretrain_step, sample_indices, tokenizer_train_step, TrainState};
use vapi_core::vapi::{is_decoder_path, ste_finetune_step, tokenizer_posttrain_step, vapi_step, VapiConfig};
use vapi_core::{Image, SeededRng, TokenSeq};

pub const FINAL_FILE: &str = "final.vapi";
pub const EVAL_FILE: &str = "eval.json";

// RNG streams under the global seed. Each stage owns an init stream and a
// training stream so stages never share draws.
const STREAM_TOK_INIT: u64 = 1;
const STREAM_TOK_TRAIN: u64 = 2;
const STREAM_AR_INIT: u64 = 3;
const STREAM_AR_TRAIN: u64 = 4;
const STREAM_POST_TRAIN: u64 = 5;

/// Paths of a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.vapd")
    }

    pub fn heldout_data(&self) -> PathBuf {
        self.root.join("data").join("heldout.vapd")
    }

    pub fn stage_dir(&self, stage: Stage, method: Method) -> PathBuf {
        match stage {
            Stage::Posttrain => self.root.join(format!("posttrain-{}", method.name())),
            s => self.root.join(s.name()),
        }
    }

    pub fn final_checkpoint(&self, stage: Stage, method: Method) -> PathBuf {
        self.stage_dir(stage, method).join(FINAL_FILE)
    }
}

/// Writes the training and held-out VAPD files.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let (train, heldout) = data::splits(cfg.data.num_samples_per_class, cfg.data.heldout_per_class, cfg.data.base_seed)?;
    data::write(&layout.train_data(), &train)?;
    data::write(&layout.heldout_data(), &heldout)?;
    Ok((layout.train_data(), layout.heldout_data()))
}

fn load_split(path: &Path) -> Result<Vec<ImageSample>> {
    if !path.exists() {
        bail!("dataset {} is missing; run `vapi gen-data` first", path.display());
    }
    data::read(path)
}

pub fn load_train(cfg: &RunConfig) -> Result<Vec<ImageSample>> {
    load_split(&Layout::new(&cfg.out).train_data())
}

pub fn load_heldout(cfg: &RunConfig) -> Result<Vec<ImageSample>> {
    load_split(&Layout::new(&cfg.out).heldout_data())
}

/// Models restored from a checkpoint; the generator is absent for
/// tokenizer-only checkpoints.
pub struct Models {
    pub tok: TokenizerParams,
    pub ar: Option<ArParams>,
}

pub fn load_models(cfg: &RunConfig, ck: &Checkpoint) -> Result<Models> {
    let mut tok = TokenizerParams::zeros(cfg.tokenizer_model());
    ck.load_store("tok", &mut tok.store)?;
    let ar = if ck.stage == Stage::TokPretrain.name() {
        None
    } else {
        let mut ar = ArParams::zeros(cfg.ar_model());
        ck.load_store("ar", &mut ar.store)?;
        Some(ar)
    };
    Ok(Models { tok, ar })
}

/// Loads the final checkpoint of a prerequisite stage and checks that it was
/// produced by the current config.
fn prerequisite(cfg: &RunConfig, stage: Stage) -> Result<Checkpoint> {
    let path = Layout::new(&cfg.out).final_checkpoint(stage, Method::Vapi);
    if !path.exists() {
        bail!("missing prerequisite stage `{stage}`: {} not found; run `vapi train --stage {stage}` first", path.display());
    }
    let ck = Checkpoint::load(&path)?;
    ck.check_hash(&cfg.stage_hash(stage), stage.name())?;
    Ok(ck)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the newest periodic checkpoint of the stage.
    pub resume: bool,
    /// Checkpoint and return after this many total steps.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub dir: PathBuf,
    pub step: u64,
    /// `None` when the run stopped early.
    pub summary: Option<StageSummary>,
    pub wall_ms: f64,
}

/// What the generic loop needs from each stage.
trait Runner {
    fn stage(&self) -> Stage;
    fn method(&self) -> Option<Method>;
    fn state(&self) -> &TrainState;
    fn step(&mut self) -> Result<BTreeMap<String, f64>>;
    fn save(&self, ck: &mut Checkpoint);
    fn restore(&mut self, ck: &Checkpoint) -> Result<()>;
    fn summary(&self) -> Result<BTreeMap<String, f64>>;
}

struct Schedule {
    steps: u64,
    checkpoint_every: u64,
    log_every: u64,
}

/// Trains one stage. Posttrain uses `method`; other stages ignore it.
pub fn train(cfg: &RunConfig, stage: Stage, method: Method, opts: TrainOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let bank = FrozenFeatureBank::new();
    match stage {
        Stage::TokPretrain => {
            let s = &cfg.tokenizer;
            let sched = Schedule { steps: s.steps, checkpoint_every: s.checkpoint_every, log_every: s.log_every };
            let mut r = TokRunner::new(cfg, load_train(cfg)?, bank)?;
            drive(cfg, &mut r, sched, opts)
        }
        Stage::ArPretrain => {
            let s = &cfg.ar;
            let sched = Schedule { steps: s.steps, checkpoint_every: s.checkpoint_every, log_every: s.log_every };
            let tok_ck = prerequisite(cfg, Stage::TokPretrain)?;
            let mut r = ArRunner::new(cfg, &tok_ck, load_train(cfg)?)?;
            drive(cfg, &mut r, sched, opts)
        }
        Stage::Posttrain => {
            let s = &cfg.posttrain;
            let sched = Schedule { steps: s.steps, checkpoint_every: s.checkpoint_every, log_every: s.log_every };
            let ar_ck = prerequisite(cfg, Stage::ArPretrain)?;
            let mut r = PostRunner::new(cfg, method, &ar_ck, load_train(cfg)?, bank)?;
            drive(cfg, &mut r, sched, opts)
        }
    }
}

fn drive(cfg: &RunConfig, r: &mut dyn Runner, sched: Schedule, opts: TrainOptions) -> Result<StageOutcome> {
    let stage = r.stage();
    let method = r.method();
    let method_name = method.map_or("", |m| m.name());
    let dir = Layout::new(&cfg.out).stage_dir(stage, method.unwrap_or(Method::Vapi));
    let hash = match method {
        Some(m) => {
            let mut c = cfg.clone();
            c.posttrain.method = m;
            c.stage_hash(stage)
        }
        None => cfg.stage_hash(stage),
    };
    let mut log = match checkpoint::latest(&dir)?.filter(|_| opts.resume) {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            ck.check_hash(&hash, stage.name())?;
            r.restore(&ck).with_context(|| format!("restoring {}", path.display()))?;
            MetricLog::resume(&dir, ck.step)?
        }
        None => {
            if dir.exists() {
                // A fresh run owns its directory; stale checkpoints from an
                // earlier config would otherwise be picked up by `--resume`.
                for entry in std::fs::read_dir(&dir)? {
                    let p = entry?.path();
                    if p.is_file() {
                        std::fs::remove_file(&p)?;
                    }
                }
            }
            MetricLog::create(&dir)?
        }
    };
    let snapshot = |r: &dyn Runner| {
        let mut ck = Checkpoint::new(stage.name(), method_name, hash, r.state().step);
        r.save(&mut ck);
        ck
    };
    while r.state().step < sched.steps {
        let values = r.step()?;
        let step = r.state().step;
        if step.is_multiple_of(sched.log_every) || step == sched.steps || step == 1 {
            log.append(&MetricRecord { step, stage: stage.name().into(), values })?;
        }
        if step.is_multiple_of(sched.checkpoint_every) || step == sched.steps {
            snapshot(r).save(&checkpoint::step_file(&dir, step))?;
        }
        if opts.stop_after.is_some_and(|n| step >= n) && step < sched.steps {
            snapshot(r).save(&checkpoint::step_file(&dir, step))?;
            log.flush()?;
            return Ok(StageOutcome { dir, step, summary: None, wall_ms: log.elapsed_ms() });
        }
    }
    log.flush()?;
    let final_ck = snapshot(r);
    final_ck.save(&dir.join(FINAL_FILE))?;
    let summary = StageSummary {
        stage: stage.name().into(),
        method: method.map(|m| m.name().into()),
        steps: r.state().step,
        values: r.summary()?,
    };
    metrics::write_json(&dir.join(metrics::SUMMARY_FILE), &summary)?;
    let wall_ms = log.elapsed_ms();
    metrics::write_json(&dir.join(metrics::WALL_FILE), &WallClock { train_ms: wall_ms })?;
    Ok(StageOutcome { dir, step: r.state().step, summary: Some(summary), wall_ms })
}

fn images(data: &[ImageSample]) -> Vec<Image> {
    data.iter().map(|s| s.image.clone()).collect()
}

/// JSON has no infinity; a perfect reconstruction is reported as 999 dB.
fn finite_psnr(mse: f64) -> f64 {
    psnr(mse).min(999.0)
}

struct TokRunner {
    tok: TokenizerParams,
    state: TrainState,
    train: Vec<Image>,
    bank: FrozenFeatureBank,
    batch: usize,
}

impl TokRunner {
    fn new(cfg: &RunConfig, data: Vec<ImageSample>, bank: FrozenFeatureBank) -> Result<Self> {
        let train = images(&data);
        let mut init = SeededRng::new(cfg.seed, STREAM_TOK_INIT);
        let tok = TokenizerParams::init(cfg.tokenizer_model(), &mut init, Some(&train))?;
        let opt = AdamW::new(&tok.store, |_| true, cfg.tokenizer.lr, cfg.tokenizer.weight_decay);
        let state = TrainState::new(opt, SeededRng::new(cfg.seed, STREAM_TOK_TRAIN));
        Ok(Self { tok, state, train, bank, batch: cfg.tokenizer.batch_size })
    }
}

impl Runner for TokRunner {
    fn stage(&self) -> Stage {
        Stage::TokPretrain
    }
    fn method(&self) -> Option<Method> {
        None
    }
    fn state(&self) -> &TrainState {
        &self.state
    }

    fn step(&mut self) -> Result<BTreeMap<String, f64>> {
        let idx = sample_indices(&mut self.state.rng, self.train.len(), self.batch);
        let batch: Vec<Image> = idx.iter().map(|&i| self.train[i].clone()).collect();
        let m = tokenizer_train_step(&mut self.tok, &mut self.state, &self.bank, &batch)?;
        Ok(BTreeMap::from([
            ("loss".into(), m.loss),
            ("mse".into(), m.parts.mse),
            ("perceptual".into(), m.parts.perceptual),
            ("codebook".into(), m.parts.codebook),
            ("commit".into(), m.parts.commit),
            ("batch_usage".into(), m.batch_usage as f64),
        ]))
    }

    fn save(&self, ck: &mut Checkpoint) {
        ck.put_store("tok", &self.tok.store);
        ck.put_optimizer(&self.state.opt);
        ck.put_rng("train", &self.state.rng);
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("tok", &mut self.tok.store)?;
        ck.load_optimizer(&mut self.state.opt)?;
        self.state.rng = ck.rng("train")?;
        self.state.step = ck.step;
        Ok(())
    }

    fn summary(&self) -> Result<BTreeMap<String, f64>> {
        let mse = recon_mse(&self.tok, &self.train)?;
        Ok(BTreeMap::from([
            ("train_mse".into(), mse),
            ("train_psnr".into(), finite_psnr(mse)),
            ("codebook_usage".into(), codebook_usage(&self.tok, &self.train)? as f64),
        ]))
    }
}

struct ArRunner {
    tok: TokenizerParams,
    ar: ArParams,
    state: TrainState,
    labels: Vec<usize>,
    tokens: Vec<TokenSeq>,
    batch: usize,
}

impl ArRunner {
    fn new(cfg: &RunConfig, tok_ck: &Checkpoint, data: Vec<ImageSample>) -> Result<Self> {
        let mut tok = TokenizerParams::zeros(cfg.tokenizer_model());
        tok_ck.load_store("tok", &mut tok.store)?;
        let tokens = tok.tokenize_batch(&images(&data))?;
        let labels = data.iter().map(|s| s.label.id()).collect();
        let ar = ArParams::init(cfg.ar_model(), &mut SeededRng::new(cfg.seed, STREAM_AR_INIT))?;
        let opt = AdamW::new(&ar.store, |_| true, cfg.ar.lr, cfg.ar.weight_decay);
        let state = TrainState::new(opt, SeededRng::new(cfg.seed, STREAM_AR_TRAIN));
        Ok(Self { tok, ar, state, labels, tokens, batch: cfg.ar.batch_size })
    }
}

/// Mean teacher-forced NLL per token over a tokenized set, batched.
pub fn mean_nll(ar: &ArParams, labels: &[usize], tokens: &[TokenSeq]) -> Result<f64> {
    let mut total = 0.0;
    for (l, x) in labels.chunks(256).zip(tokens.chunks(256)) {
        let refs: Vec<&TokenSeq> = x.iter().collect();
        let logits = ar.forward_batch(l, &refs)?;
        let (n, k) = (ar.cfg.seq_len, ar.cfg.vocab);
        for (i, seq) in x.iter().enumerate() {
            for t in 0..n {
                let row = &logits.data()[(i * n + t) * k..(i * n + t + 1) * k];
                total += vapi_core::num::log_sum_exp(row) - row[seq[t]];
            }
        }
    }
    Ok(total / (tokens.len() * ar.cfg.seq_len) as f64)
}

impl Runner for ArRunner {
    fn stage(&self) -> Stage {
        Stage::ArPretrain
    }
    fn method(&self) -> Option<Method> {
        None
    }
    fn state(&self) -> &TrainState {
        &self.state
    }

    fn step(&mut self) -> Result<BTreeMap<String, f64>> {
        let idx = sample_indices(&mut self.state.rng, self.tokens.len(), self.batch);
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let targets: Vec<&TokenSeq> = idx.iter().map(|&i| &self.tokens[i]).collect();
        let loss = ar_pretrain_step(&mut self.ar, &mut self.state, &labels, &targets)?;
        Ok(BTreeMap::from([("nll".into(), loss)]))
    }

    fn save(&self, ck: &mut Checkpoint) {
        ck.put_store("tok", &self.tok.store);
        ck.put_store("ar", &self.ar.store);
        ck.put_optimizer(&self.state.opt);
        ck.put_rng("train", &self.state.rng);
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("ar", &mut self.ar.store)?;
        ck.load_optimizer(&mut self.state.opt)?;
        self.state.rng = ck.rng("train")?;
        self.state.step = ck.step;
        Ok(())
    }

    fn summary(&self) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::from([("train_nll".into(), mean_nll(&self.ar, &self.labels, &self.tokens)?)]))
    }
}

struct PostRunner {
    method: Method,
    tok: TokenizerParams,
    ar: ArParams,
    state: TrainState,
    data: Vec<ImageSample>,
    bank: FrozenFeatureBank,
    vcfg: VapiConfig,
}

impl PostRunner {
    fn new(cfg: &RunConfig, method: Method, ar_ck: &Checkpoint, data: Vec<ImageSample>, bank: FrozenFeatureBank) -> Result<Self> {
        let mut tok = TokenizerParams::zeros(cfg.tokenizer_model());
        ar_ck.load_store("tok", &mut tok.store)?;
        let mut ar = ArParams::zeros(cfg.ar_model());
        ar_ck.load_store("ar", &mut ar.store)?;
        let (lr, wd) = (cfg.posttrain.lr, cfg.posttrain.weight_decay);
        let opt = match method {
            Method::Vapi | Method::Ste => AdamW::new(&ar.store, |_| true, lr, wd),
            Method::TokPt => AdamW::new(&tok.store, is_decoder_path, lr, wd),
        };
        let rng = SeededRng::new(cfg.seed, STREAM_POST_TRAIN).fork(method as u64);
        Ok(Self { method, tok, ar, state: TrainState::new(opt, rng), data, bank, vcfg: cfg.posttrain.vapi() })
    }
}

impl Runner for PostRunner {
    fn stage(&self) -> Stage {
        Stage::Posttrain
    }
    fn method(&self) -> Option<Method> {
        Some(self.method)
    }
    fn state(&self) -> &TrainState {
        &self.state
    }

    fn step(&mut self) -> Result<BTreeMap<String, f64>> {
        let idx = sample_indices(&mut self.state.rng, self.data.len(), self.vcfg.batch_size);
        let batch: Vec<&ImageSample> = idx.iter().map(|&i| &self.data[i]).collect();
        let (tok, ar, bank, cfg) = (&mut self.tok, &mut self.ar, &self.bank, &self.vcfg);
        Ok(match self.method {
            Method::Vapi => {
                let m = vapi_step(ar, tok, bank, &mut self.state, &batch, cfg)?;
                BTreeMap::from([
                    ("mean_reward".into(), m.mean_reward),
                    ("prior".into(), m.mean_prior),
                    ("surrogate".into(), m.surrogate),
                    ("objective".into(), m.objective),
                    ("clip_fraction".into(), m.clip_fraction),
                    ("mean_abs_advantage".into(), m.mean_abs_advantage),
                    ("grad_norm".into(), m.grad_norm),
                ])
            }
            Method::Ste | Method::TokPt => {
                let m = if self.method == Method::Ste {
                    ste_finetune_step(ar, tok, bank, &mut self.state, &batch, cfg)?
                } else {
                    tokenizer_posttrain_step(ar, tok, bank, &mut self.state, &batch, cfg)?
                };
                BTreeMap::from([
                    ("loss".into(), m.loss),
                    ("mse".into(), m.mse),
                    ("perceptual".into(), m.perceptual),
                    ("grad_norm".into(), m.grad_norm),
                ])
            }
        })
    }

    fn save(&self, ck: &mut Checkpoint) {
        ck.put_store("tok", &self.tok.store);
        ck.put_store("ar", &self.ar.store);
        ck.put_optimizer(&self.state.opt);
        ck.put_rng("train", &self.state.rng);
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("tok", &mut self.tok.store)?;
        ck.load_store("ar", &mut self.ar.store)?;
        ck.load_optimizer(&mut self.state.opt)?;
        self.state.rng = ck.rng("train")?;
        self.state.step = ck.step;
        Ok(())
    }

    fn summary(&self) -> Result<BTreeMap<String, f64>> {
        let imgs = images(&self.data);
        let mse = recon_mse(&self.tok, &imgs)?;
        Ok(BTreeMap::from([("train_psnr".into(), finite_psnr(mse))]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_stage_directories() {
        let l = Layout::new("/tmp/run");
        assert_eq!(l.stage_dir(Stage::TokPretrain, Method::Ste), PathBuf::from("/tmp/run/tok-pretrain"));
        assert_eq!(l.stage_dir(Stage::Posttrain, Method::TokPt), PathBuf::from("/tmp/run/posttrain-tok-pt"));
    }
}
