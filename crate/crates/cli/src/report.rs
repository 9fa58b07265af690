//! Summary of final performance across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use losslearn::meta::{Method, Split};
use serde::Serialize;

use crate::output::{RunRecord, RECORD};
use crate::{io_error, CliError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub split: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Default)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    /// Inputs that were skipped, with the reason.
    pub warnings: Vec<String>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `dir/record.json`, or else the records one level below `dir`.
fn record_paths(dir: &Path) -> Vec<PathBuf> {
    let direct = dir.join(RECORD);
    if direct.is_file() {
        return vec![direct];
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path().join(RECORD))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    found
}

pub fn summarize(dirs: &[PathBuf]) -> Result<Report, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one run directory".into(),
        ));
    }
    let mut report = Report::default();
    let mut groups: BTreeMap<(usize, Split), (String, Vec<f64>)> = BTreeMap::new();
    for dir in dirs {
        let paths = record_paths(dir);
        if paths.is_empty() {
            report
                .warnings
                .push(format!("{}: no {RECORD} found", dir.display()));
        }
        for path in paths {
            let record = match RunRecord::read(&path) {
                Ok(r) => r,
                Err(e) => {
                    report.warnings.push(e.to_string());
                    continue;
                }
            };
            let run = &record.run;
            let order = Method::ALL
                .iter()
                .position(|&m| m == run.method)
                .expect("known method");
            let metric = metric_name(&record.config.task);
            for split in [Split::Train, Split::Test] {
                if run.curves.iter().any(|c| c.split == split) {
                    groups
                        .entry((order, split))
                        .or_insert_with(|| (metric.to_string(), Vec::new()))
                        .1
                        .push(run.final_metric(split));
                }
            }
        }
    }
    for ((order, split), (metric, values)) in groups {
        let (mean, sd) = mean_sd(&values);
        report.rows.push(SummaryRow {
            method: Method::ALL[order].name().to_string(),
            split: split.name().to_string(),
            metric,
            n: values.len(),
            mean,
            sd,
        });
    }
    Ok(report)
}

fn metric_name(task: &crate::TaskConfig) -> &'static str {
    use crate::TaskConfig;
    use losslearn::tasks::TaskKind;
    let kind = match task {
        TaskConfig::Sine { .. } => TaskKind::Regression,
        TaskConfig::Blobs { .. } => TaskKind::Multiclass,
        TaskConfig::Csv { schema, .. } => schema.kind,
    };
    kind.loss().metric().name()
}

impl Report {
    pub fn to_text(&self) -> String {
        let header = ["method", "split", "metric", "n", "mean ± sd"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.split.clone(),
                    r.metric.clone(),
                    r.n.to_string(),
                    format!("{:.6} ± {:.6}", r.mean, r.sd),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cols: &[String]| {
            let parts: Vec<String> = cols
                .iter()
                .zip(&width)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header.map(String::from));
        for row in &cells {
            line(row);
        }
        out
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_csv()?).map_err(|e| io_error(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
        let (m, _) = mean_sd(&[1.0, f64::INFINITY]);
        assert_eq!(m, f64::INFINITY);
    }

    #[test]
    fn empty_list_is_a_usage_error() {
        assert!(matches!(summarize(&[]), Err(CliError::Usage(_))));
    }

    #[test]
    fn text_table_is_aligned() {
        let report = Report {
            rows: vec![
                SummaryRow {
                    method: "baseline".into(),
                    split: "test".into(),
                    metric: "mse".into(),
                    n: 5,
                    mean: 1.5,
                    sd: 0.25,
                },
                SummaryRow {
                    method: "ml3".into(),
                    split: "train".into(),
                    metric: "mse".into(),
                    n: 5,
                    mean: 10.0,
                    sd: 0.0,
                },
            ],
            warnings: Vec::new(),
        };
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let col = lines[0].find("split").unwrap();
        assert_eq!(lines[1].find("test").unwrap(), col);
        assert_eq!(lines[2].find("train").unwrap(), col);
        assert!(lines[1].contains("1.500000 ± 0.250000"));
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("method,split,metric,n,mean,sd\n"));
        assert!(csv.contains("baseline,test,mse,5,1.5,0.25"));
    }
}
