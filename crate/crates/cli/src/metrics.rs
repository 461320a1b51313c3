//! Line-delimited metric records.
//!
//! `metrics.jsonl` holds one JSON object per logged step and nothing that
//! depends on the clock, so two runs with the same config produce identical
//! files. Wall-clock time per record goes to the `timing.jsonl` sidecar.

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub wall_ms: f64,
}

/// Appends records in step order to a stage directory.
pub struct MetricLog {
    metrics: File,
    timing: File,
    last_step: Option<u64>,
    start: Instant,
    /// Milliseconds already spent before a resume.
    offset_ms: f64,
}

impl MetricLog {
    /// Starts fresh logs, truncating any existing files.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: File::create(dir.join(METRICS_FILE))?,
            timing: File::create(dir.join(TIMING_FILE))?,
            last_step: None,
            start: Instant::now(),
            offset_ms: 0.0,
        })
    }

    /// Reopens logs after a resume from `step`: later records are dropped so
    /// the continued run appends exactly what an uninterrupted run would.
    pub fn resume(dir: &Path, step: u64) -> Result<Self> {
        let records: Vec<MetricRecord> = read_records(&dir.join(METRICS_FILE))?.into_iter().filter(|r| r.step <= step).collect();
        let timings: Vec<TimingRecord> = read_jsonl(&dir.join(TIMING_FILE))?.into_iter().filter(|r: &TimingRecord| r.step <= step).collect();
        let mut log = Self::create(dir)?;
        for r in &records {
            writeln!(log.metrics, "{}", serde_json::to_string(r)?)?;
        }
        for t in &timings {
            writeln!(log.timing, "{}", serde_json::to_string(t)?)?;
        }
        log.last_step = records.last().map(|r| r.step);
        log.offset_ms = timings.last().map_or(0.0, |t| t.wall_ms);
        Ok(log)
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.offset_ms + self.start.elapsed().as_secs_f64() * 1e3
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        ensure!(self.last_step.is_none_or(|s| record.step > s), "metric records must be appended in step order");
        writeln!(self.metrics, "{}", serde_json::to_string(record)?)?;
        let t = TimingRecord { step: record.step, wall_ms: self.elapsed_ms() };
        writeln!(self.timing, "{}", serde_json::to_string(&t)?)?;
        self.last_step = Some(record.step);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    read_jsonl(path)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = OpenOptions::new().read(true).open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Per-stage summary written at the end of training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub method: Option<String>,
    pub steps: u64,
    pub values: BTreeMap<String, f64>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const WALL_FILE: &str = "wall.json";

/// Wall-clock totals, kept apart from the deterministic summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub train_ms: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, v: f64) -> MetricRecord {
        MetricRecord { step, stage: "ar-pretrain".into(), values: BTreeMap::from([("loss".into(), v)]) }
    }

    #[test]
    fn records_round_trip_and_stay_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricLog::create(dir.path()).unwrap();
        log.append(&rec(1, 2.0)).unwrap();
        log.append(&rec(5, 1.5)).unwrap();
        assert!(log.append(&rec(5, 1.0)).is_err());
        log.flush().unwrap();
        let back = read_records(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back, vec![rec(1, 2.0), rec(5, 1.5)]);
    }

    #[test]
    fn resume_truncates_later_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricLog::create(dir.path()).unwrap();
        for s in 1..=4 {
            log.append(&rec(s * 10, s as f64)).unwrap();
        }
        log.flush().unwrap();
        let mut log = MetricLog::resume(dir.path(), 20).unwrap();
        log.append(&rec(30, 9.0)).unwrap();
        log.flush().unwrap();
        let steps: Vec<u64> = read_records(&dir.path().join(METRICS_FILE)).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 30]);
    }
}
