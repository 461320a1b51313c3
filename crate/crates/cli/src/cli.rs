//! Command-line interface.

use crate::config::{Method, RunConfig, Stage};
use crate::evaluate::{evaluate_checkpoint, write_report};
use crate::pipeline::{self, Layout, TrainOptions, EVAL_FILE};
use crate::report;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "vapi", version, about = "Variational policy alignment of a toy token image generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and held-out datasets.
    GenData(Common),
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// Post-training method; defaults to the config's.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Continue from the newest checkpoint of the stage.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit after this many total steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint and write its report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; defaults to the final checkpoint of `--stage`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Report path; defaults to eval.json beside the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare evaluated runs as a text table and CSV.
    Report {
        /// Run output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// CSV path; defaults to report.csv in the first run directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Everything from data generation to the report, for the listed methods.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "vapi,ste,tok-pt")]
        methods: Vec<Method>,
    },
    /// Post-train and evaluate VA-π once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Prior weight.
    Beta,
    /// Context corruption rate.
    Xi,
    /// Perceptual weight in the reward.
    LambdaP,
}

fn parse_stage(s: &str) -> Result<Stage> {
    s.parse()
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let (tr, ho) = pipeline::gen_data(&cfg)?;
            println!("wrote {} and {}", tr.display(), ho.display());
        }
        Command::Train { common, stage, method, resume, stop_after } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.posttrain.method = m;
            }
            train_stage(&cfg, stage, TrainOptions { resume, stop_after })?;
        }
        Command::Eval { common, checkpoint, stage, method, report } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.posttrain.method = m;
            }
            let path = match (checkpoint, stage) {
                (Some(p), _) => p,
                (None, Some(s)) => Layout::new(&cfg.out).final_checkpoint(s, cfg.posttrain.method),
                (None, None) => bail!("pass --checkpoint or --stage"),
            };
            let out = report.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join(EVAL_FILE));
            eval_to(&cfg, &path, &out)?;
        }
        Command::Report { runs, csv } => {
            let csv = csv.unwrap_or_else(|| runs[0].join("report.csv"));
            print_report(&runs, &csv)?;
        }
        Command::Run { common, methods } => {
            let cfg = common.load()?;
            run_all(&cfg, &methods)?;
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.load()?;
            sweep(&cfg, axis, &values)?;
        }
    }
    Ok(())
}

fn train_stage(cfg: &RunConfig, stage: Stage, opts: TrainOptions) -> Result<()> {
    let label = match stage {
        Stage::Posttrain => format!("{stage} ({})", cfg.posttrain.method),
        s => s.to_string(),
    };
    eprintln!("training {label}");
    let out = pipeline::train(cfg, stage, cfg.posttrain.method, opts)?;
    match &out.summary {
        Some(s) => {
            let vals: Vec<String> = s.values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            println!("{label}: {} steps in {:.1}s; {}", s.steps, out.wall_ms / 1e3, vals.join(" "));
        }
        None => println!("{label}: stopped at step {} ({})", out.step, out.dir.display()),
    }
    Ok(())
}

fn eval_to(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    eprintln!("evaluating {}", checkpoint.display());
    let report = evaluate_checkpoint(cfg, checkpoint)?;
    write_report(out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn print_report(runs: &[PathBuf], csv: &Path) -> Result<()> {
    let rows = report::collect(runs)?;
    print!("{}", report::render_text(&rows));
    std::fs::write(csv, report::render_csv(&rows)?).with_context(|| format!("writing {}", csv.display()))?;
    println!("csv: {}", csv.display());
    Ok(())
}

/// The documented end-to-end sequence.
pub fn run_all(cfg: &RunConfig, methods: &[Method]) -> Result<()> {
    pipeline::gen_data(cfg)?;
    let layout = Layout::new(&cfg.out);
    train_stage(cfg, Stage::TokPretrain, TrainOptions::default())?;
    train_stage(cfg, Stage::ArPretrain, TrainOptions::default())?;
    let base = layout.final_checkpoint(Stage::ArPretrain, Method::Vapi);
    eval_to(cfg, &base, &base.with_file_name(EVAL_FILE))?;
    for &m in methods {
        let mut c = cfg.clone();
        c.posttrain.method = m;
        train_stage(&c, Stage::Posttrain, TrainOptions::default())?;
        let ck = layout.final_checkpoint(Stage::Posttrain, m);
        eval_to(&c, &ck, &ck.with_file_name(EVAL_FILE))?;
    }
    print_report(std::slice::from_ref(&cfg.out), &cfg.out.join("report.csv"))
}

/// Each value gets its own run directory under `out/sweep/`, seeded with
/// copies of the shared data and pretrained checkpoints.
pub fn sweep(cfg: &RunConfig, axis: Axis, values: &[f64]) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let mut roots = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        c.posttrain.method = Method::Vapi;
        let name = match axis {
            Axis::Beta => {
                c.posttrain.beta = v;
                format!("beta-{v}")
            }
            Axis::Xi => {
                c.posttrain.xi = v;
                format!("xi-{v}")
            }
            Axis::LambdaP => {
                c.posttrain.lambda_p = v;
                format!("lambda_p-{v}")
            }
        };
        c.out = cfg.out.join("sweep").join(name);
        c.validate()?;
        let sub = Layout::new(&c.out);
        let base_eval = layout.stage_dir(Stage::ArPretrain, Method::Vapi).join(EVAL_FILE);
        let copies = [
            (layout.train_data(), sub.train_data(), true),
            (layout.heldout_data(), sub.heldout_data(), true),
            (layout.final_checkpoint(Stage::TokPretrain, Method::Vapi), sub.final_checkpoint(Stage::TokPretrain, Method::Vapi), true),
            (layout.final_checkpoint(Stage::ArPretrain, Method::Vapi), sub.final_checkpoint(Stage::ArPretrain, Method::Vapi), true),
            (base_eval, sub.stage_dir(Stage::ArPretrain, Method::Vapi).join(EVAL_FILE), false),
        ];
        for (from, to, required) in copies {
            if !from.exists() {
                if required {
                    bail!("sweep needs data and pretrained stages; {} is missing", from.display());
                }
                continue;
            }
            std::fs::create_dir_all(to.parent().unwrap())?;
            std::fs::copy(&from, &to).with_context(|| format!("copying {}", from.display()))?;
        }
        train_stage(&c, Stage::Posttrain, TrainOptions::default())?;
        let ck = sub.final_checkpoint(Stage::Posttrain, Method::Vapi);
        eval_to(&c, &ck, &ck.with_file_name(EVAL_FILE))?;
        roots.push(c.out);
    }
    print_report(&roots, &cfg.out.join("sweep").join("report.csv"))
}
