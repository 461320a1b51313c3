//! Comparison table across methods and runs.

use crate::config::{Method, Stage};
use crate::evaluate::EvalReport;
use crate::metrics::{self, WallClock};
use crate::pipeline::{Layout, EVAL_FILE};
use anyhow::{bail, Result};
use std::path::{Path, PathBuf};

pub const COLUMNS: [&str; 10] =
    ["run", "toy_fid", "tf_reward", "free_reward", "exposure", "elbo", "nll", "probe", "psnr", "wall_s"];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub run: String,
    pub report: EvalReport,
    /// Training time of the row's own stage.
    pub wall_s: Option<f64>,
}

impl Row {
    fn cells(&self) -> Vec<String> {
        let f = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
        let g = self.report.generator.as_ref();
        vec![
            self.run.clone(),
            f(g.map(|g| g.toy_fid), 4),
            f(g.map(|g| g.tf_reward), 4),
            f(g.map(|g| g.free_reward), 4),
            f(g.map(|g| g.exposure_bias), 4),
            f(g.map(|g| g.elbo), 2),
            f(g.map(|g| g.train_nll), 4),
            f(g.map(|g| g.probe_accuracy), 3),
            f(Some(self.report.train_psnr), 2),
            f(self.wall_s, 1),
        ]
    }
}

/// Rows for every evaluated stage under each run directory, in the fixed
/// order base, vapi, ste, tok-pt. With several runs the row name is prefixed
/// by the run directory.
pub fn collect(runs: &[PathBuf]) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for root in runs {
        let layout = Layout::new(root);
        let mut dirs = vec![("base".to_string(), layout.stage_dir(Stage::ArPretrain, Method::Vapi))];
        dirs.extend(Method::ALL.iter().map(|m| (m.name().to_string(), layout.stage_dir(Stage::Posttrain, *m))));
        for (name, dir) in dirs {
            let eval = dir.join(EVAL_FILE);
            if !eval.exists() {
                continue;
            }
            let report: EvalReport = metrics::read_json(&eval)?;
            let wall_s = wall(&dir)?;
            let run = if runs.len() > 1 { format!("{}/{name}", root.display()) } else { name };
            rows.push(Row { run, report, wall_s });
        }
    }
    if rows.is_empty() {
        bail!("no evaluated runs found; run `vapi eval` first");
    }
    Ok(rows)
}

fn wall(dir: &Path) -> Result<Option<f64>> {
    let p = dir.join(metrics::WALL_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let w: WallClock = metrics::read_json(&p)?;
    Ok(Some(w.train_ms / 1e3))
}

/// Right-aligned text table.
pub fn render_text(rows: &[Row]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(Row::cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap())
        .collect();
    let line = |r: &[String]| {
        let parts: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        parts.join("  ")
    };
    let mut out = line(&COLUMNS.map(String::from));
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
