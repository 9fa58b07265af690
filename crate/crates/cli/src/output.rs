//! Files written into a run directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use losslearn::gp::GenerationRecord;
use losslearn::meta::{CurveRecord, MethodRun};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{io_error, CliError};

pub const RECORD: &str = "record.json";
pub const FITNESS_HISTORY: &str = "fitness_history.csv";
pub const LOSS_SEXP: &str = "loss.sexp";
pub const LOSS_WEIGHTS: &str = "loss_weights.json";
pub const CURVES: &str = "curves.csv";
pub const FITNESS_REPORTS: &str = "fitness_reports.jsonl";

/// Everything needed to reproduce and summarize one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub run: MethodRun,
}

impl RunRecord {
    pub fn new(config: RunConfig, run: MethodRun) -> Self {
        RunRecord {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            run,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_error(path, e))
    }
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub method: String,
    pub task_id: usize,
    pub split: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

pub fn curve_rows(seed: u64, method: &str, metric: &str, curves: &[CurveRecord]) -> Vec<CurveRow> {
    curves
        .iter()
        .flat_map(|c| {
            c.curve.points.iter().map(move |&(step, value)| CurveRow {
                seed,
                method: method.to_string(),
                task_id: c.task_id,
                split: c.split.name().to_string(),
                step,
                metric: metric.to_string(),
                value,
            })
        })
        .collect()
}

/// Appends to `curves.csv`, writing the header only when the file is new.
pub fn append_curves(dir: &Path, rows: &[CurveRow]) -> Result<PathBuf, CliError> {
    let path = dir.join(CURVES);
    let fresh = !path.exists() || fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_error(&path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn write_history(path: &Path, history: &[GenerationRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    for h in history {
        w.serialize(h).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Writes the full set of run artifacts into `dir`. `curves.csv` is replaced.
pub fn write_run(dir: &Path, record: &RunRecord, metric: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let run = &record.run;

    let json = serde_json::to_string_pretty(record).map_err(|e| io_error(dir, e))?;
    write_text(&dir.join(RECORD), &json)?;

    if let Some(search) = &run.search {
        write_history(&dir.join(FITNESS_HISTORY), &search.history)?;
        let path = dir.join(FITNESS_REPORTS);
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut w = BufWriter::new(file);
        for c in &run.candidates {
            let line = serde_json::to_string(c).map_err(|e| io_error(&path, e))?;
            writeln!(w, "{line}").map_err(|e| io_error(&path, e))?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
    }
    if let Some(loss) = &run.loss {
        if let Some(expr) = loss.expression() {
            write_text(&dir.join(LOSS_SEXP), &format!("{expr}\n"))?;
        }
        let json = serde_json::to_string_pretty(loss).map_err(|e| io_error(dir, e))?;
        write_text(&dir.join(LOSS_WEIGHTS), &json)?;
    }

    let curves = dir.join(CURVES);
    if curves.exists() {
        fs::remove_file(&curves).map_err(|e| io_error(&curves, e))?;
    }
    append_curves(
        dir,
        &curve_rows(run.seed, run.method.name(), metric, &run.curves),
    )?;
    Ok(())
}
