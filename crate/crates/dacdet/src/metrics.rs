//! Run logs. `metrics.jsonl` is append-only and holds only values that follow
//! from config, seed and data, so two identical runs write identical bytes.
//! Wall-clock time goes to `timing.jsonl` instead.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dacdet_core::boxes::ParasiteClass;
use dacdet_core::evalmap::APReport;
use dacdet_core::losses::LossBreakdown;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record<'a> {
    Config {
        config: &'a ExperimentConfig,
        #[serde(skip_serializing_if = "Option::is_none")]
        resumed_from_step: Option<u64>,
    },
    Step {
        step: u64,
        epoch: usize,
        #[serde(flatten)]
        loss: &'a LossBreakdown,
    },
    Eval {
        step: u64,
        epoch: usize,
        split: &'a str,
        #[serde(flatten)]
        report: &'a APReport,
    },
    Abort {
        step: u64,
        reason: String,
    },
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    timing: BufWriter<File>,
    started: Instant,
    last_step: Option<u64>,
}

impl MetricsLog {
    /// Starts a fresh log in `dir`, or appends to the existing one.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            path: dir.join(METRICS_FILE),
            out: open(METRICS_FILE)?,
            timing: open(TIMING_FILE)?,
            started: Instant::now(),
            last_step: None,
        })
    }

    pub fn write(&mut self, record: &Record<'_>) -> Result<()> {
        if let Record::Step { step, .. } = record {
            if self.last_step.is_some_and(|last| *step <= last) {
                return Err(Error::Other(format!("step {step} logged after step {:?}", self.last_step)));
            }
            self.last_step = Some(*step);
            let t = serde_json::json!({ "step": step, "elapsed_s": self.started.elapsed().as_secs_f64() });
            writeln!(self.timing, "{t}").map_err(|e| Error::io(&self.path, e))?;
        }
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        let t = serde_json::json!({ "total_s": self.started.elapsed().as_secs_f64() });
        writeln!(self.timing, "{t}").map_err(|e| Error::io(&self.path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes one `recall,precision` CSV per class into `dir`.
pub fn write_pr_curves(dir: &Path, report: &APReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for class in ParasiteClass::ALL {
        let mut text = String::from("recall,precision\n");
        for p in &report.curves[class.id()] {
            text.push_str(&format!("{},{}\n", p.recall, p.precision));
        }
        let path = dir.join(format!("pr_{}.csv", class.name()));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub steps: u64,
    pub epochs: usize,
    pub first_loss: Option<&'a LossBreakdown>,
    pub last_loss: Option<&'a LossBreakdown>,
    pub test: Option<&'a APReport>,
}

pub fn write_summary(dir: &Path, summary: &Summary<'_>) -> Result<()> {
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
