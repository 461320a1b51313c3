//! End-to-end behaviour of the pipeline on the tiny enumerable config.

use std::path::{Path, PathBuf};
use std::process::Command;
use vapi::config::{Method, RunConfig, Stage};
use vapi::evaluate::{evaluate_checkpoint, EvalReport};
use vapi::metrics::{self, METRICS_FILE};
use vapi::pipeline::{self, Layout, TrainOptions};
use vapi::report;

fn tiny(out: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vapi"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn pretrain(cfg: &RunConfig) {
    pipeline::gen_data(cfg).unwrap();
    pipeline::train(cfg, Stage::TokPretrain, Method::Vapi, TrainOptions::default()).unwrap();
    pipeline::train(cfg, Stage::ArPretrain, Method::Vapi, TrainOptions::default()).unwrap();
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, ha) = pipeline::gen_data(&tiny(a.path())).unwrap();
    let (tb, hb) = pipeline::gen_data(&tiny(b.path())).unwrap();
    assert_eq!(read(ta.clone()), read(tb));
    assert_eq!(read(ha), read(hb));
    let back = vapi::data::read(&ta).unwrap();
    assert_eq!(back.len(), 8 * 20);
}

#[test]
fn zero_samples_per_class_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.num_samples_per_class = 0;
    assert!(pipeline::gen_data(&cfg).is_err());
    let out = bin().args(["gen-data", "--config"]).arg(write_config(dir.path(), &cfg)).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_samples_per_class"));
}

#[test]
fn missing_prerequisite_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_data(&cfg).unwrap();
    let err = pipeline::train(&cfg, Stage::ArPretrain, Method::Vapi, TrainOptions::default()).unwrap_err();
    assert!(format!("{err:#}").contains("tok-pretrain"), "{err:#}");

    let out = bin()
        .args(["train", "--stage", "posttrain", "--config"])
        .arg(write_config(dir.path(), &cfg))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ar-pretrain"));
}

#[test]
fn changed_config_is_refused_by_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pretrain(&cfg);
    let mut other = cfg.clone();
    other.ar.lr *= 2.0;
    let err = pipeline::train(&other, Stage::Posttrain, Method::Vapi, TrainOptions::default()).unwrap_err();
    assert!(format!("{err:#}").contains("config hash mismatch"), "{err:#}");
    // Posttrain settings do not touch the pretrained stages.
    let mut post = cfg.clone();
    post.posttrain.beta = 0.3;
    post.posttrain.steps = 2;
    pipeline::train(&post, Stage::Posttrain, Method::Vapi, TrainOptions::default()).unwrap();
}

#[test]
fn every_stage_resumes_bitwise() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = tiny(a.path());
    let cb = tiny(b.path());
    let (la, lb) = (Layout::new(a.path()), Layout::new(b.path()));
    pipeline::gen_data(&ca).unwrap();
    pipeline::gen_data(&cb).unwrap();
    let stages = [
        (Stage::TokPretrain, Method::Vapi, 100),
        (Stage::ArPretrain, Method::Vapi, 200),
        (Stage::Posttrain, Method::Vapi, 10),
        (Stage::Posttrain, Method::Ste, 10),
        (Stage::Posttrain, Method::TokPt, 10),
    ];
    for (stage, method, mid) in stages {
        pipeline::train(&ca, stage, method, TrainOptions::default()).unwrap();
        let early = pipeline::train(&cb, stage, method, TrainOptions { resume: false, stop_after: Some(mid) }).unwrap();
        assert!(early.summary.is_none());
        assert_eq!(early.step, mid);
        pipeline::train(&cb, stage, method, TrainOptions { resume: true, stop_after: None }).unwrap();
        let name = format!("{stage}/{method}");
        assert_eq!(read(la.final_checkpoint(stage, method)), read(lb.final_checkpoint(stage, method)), "{name}");
        let (da, db) = (la.stage_dir(stage, method), lb.stage_dir(stage, method));
        assert_eq!(read(da.join(METRICS_FILE)), read(db.join(METRICS_FILE)), "{name}");
        assert_eq!(read(da.join(metrics::SUMMARY_FILE)), read(db.join(metrics::SUMMARY_FILE)), "{name}");
    }
}

#[test]
fn evaluation_and_report_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    vapi::cli::run_all(&cfg, &Method::ALL).unwrap();
    let layout = Layout::new(dir.path());

    let ck = layout.final_checkpoint(Stage::Posttrain, Method::Vapi);
    let again = evaluate_checkpoint(&cfg, &ck).unwrap();
    let stored: EvalReport = metrics::read_json(&ck.with_file_name(pipeline::EVAL_FILE)).unwrap();
    assert_eq!(again, stored);

    // The tiny config is enumerable, so the exact oracle ran and the ELBO
    // estimate sits below the true marginal for every evaluated image.
    let g = stored.generator.unwrap();
    let slack = g.exact_min_slack.expect("exact oracle on the tiny config");
    assert!(slack >= -1e-9, "slack {slack}");

    let rows = report::collect(&[dir.path().to_path_buf()]).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(names, ["base", "vapi", "ste", "tok-pt"]);
    let csv = report::render_csv(&rows).unwrap();
    assert_eq!(csv, report::render_csv(&report::collect(&[dir.path().to_path_buf()]).unwrap()).unwrap());
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap(), csv);
}

#[test]
fn exact_oracle_is_refused_on_large_token_spaces() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    pretrain(&cfg);
    let ck = Layout::new(dir.path()).final_checkpoint(Stage::ArPretrain, Method::Vapi);
    assert!(evaluate_checkpoint(&cfg, &ck).is_ok());
    cfg.eval.num_generated = 64;
    cfg.tokenizer.codebook_size = 32;
    cfg.tokenizer.patch_side = 4;
    let err = vapi::evaluate::evaluate_models(
        &cfg,
        &vapi_core::tokenizer::TokenizerParams::zeros(cfg.tokenizer_model()),
        None,
        "tok-pretrain",
        "",
        0,
    )
    .unwrap_err();
    assert!(format!("{err}").contains("not enumerable"), "{err}");
}

#[test]
fn checkpoint_files_round_trip_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pretrain(&cfg);
    for stage in [Stage::TokPretrain, Stage::ArPretrain] {
        let path = Layout::new(dir.path()).final_checkpoint(stage, Method::Vapi);
        let bytes = read(path.clone());
        let ck = vapi::checkpoint::Checkpoint::load(&path).unwrap();
        assert_eq!(ck.encode(), bytes);
        assert_eq!(ck.stage, stage.name());
        assert!(vapi::checkpoint::Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(vapi::checkpoint::Checkpoint::decode(&extra).is_err());
    }
}
