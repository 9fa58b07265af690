//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use losslearn::gp::GpConfig;
use losslearn::meta::{MetaConfig, Method};
use losslearn::tasks::{load_csv_task, BlobSpec, CsvSchema, MetaDataset};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "LOSSLEARN_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

fn five() -> usize {
    5
}

fn blob_classes() -> usize {
    3
}

fn blob_dim() -> usize {
    2
}

fn blob_separation() -> f64 {
    3.0
}

fn blob_spread() -> f64 {
    1.0
}

/// Task family and its parameters, selected by `family`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Sine {
        #[serde(default = "five")]
        train_tasks: usize,
        #[serde(default = "five")]
        test_tasks: usize,
    },
    Blobs {
        #[serde(default = "blob_classes")]
        classes: usize,
        #[serde(default = "blob_dim")]
        dim: usize,
        #[serde(default = "blob_separation")]
        separation: f64,
        #[serde(default = "blob_spread")]
        spread: f64,
        #[serde(default = "five")]
        train_tasks: usize,
        #[serde(default = "five")]
        test_tasks: usize,
    },
    /// One task per file. Relative paths are taken from the config file's
    /// directory.
    Csv {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        schema: CsvSchema,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Sine {
            train_tasks: 5,
            test_tasks: 5,
        }
    }
}

fn yes() -> bool {
    true
}

fn ten() -> usize {
    10
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Softplus output wrapper on symbolic losses.
    #[serde(default = "yes")]
    pub wrapper: bool,
    /// Relative paths are placed under the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Curve logging interval in base steps.
    #[serde(default = "ten")]
    pub log_interval: usize,
    /// Threads evaluating candidates concurrently.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub meta: MetaConfig,
}

impl RunConfig {
    /// Parses and validates; CSV paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("at `{path}`: {inner}"))
            }
        })?;
        if let TaskConfig::Csv { train, test, .. } = &mut cfg.task {
            for p in train.iter_mut().chain(test.iter_mut()) {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.gp.validate()?;
        self.meta.validate()?;
        if self.log_interval == 0 {
            return Err(field("log_interval", "must be positive"));
        }
        if self.workers == 0 {
            return Err(field("workers", "must be positive"));
        }
        match &self.task {
            TaskConfig::Sine {
                train_tasks,
                test_tasks,
            } => task_counts(*train_tasks, *test_tasks),
            TaskConfig::Blobs {
                train_tasks,
                test_tasks,
                ..
            } => {
                task_counts(*train_tasks, *test_tasks)?;
                self.blob_spec()
                    .expect("blobs family")
                    .validate()
                    .map_err(|e| prefixed("task", e))
            }
            TaskConfig::Csv { train, test, .. } => {
                if train.is_empty() {
                    return Err(field("task.train", "need at least one file"));
                }
                if test.is_empty() {
                    return Err(field("task.test", "need at least one file"));
                }
                Ok(())
            }
        }
    }

    fn blob_spec(&self) -> Option<BlobSpec> {
        match self.task {
            TaskConfig::Blobs {
                classes,
                dim,
                separation,
                spread,
                ..
            } => Some(BlobSpec {
                classes,
                dim,
                separation,
                spread,
            }),
            _ => None,
        }
    }

    pub fn dataset(&self) -> Result<MetaDataset, CliError> {
        let ds = match &self.task {
            TaskConfig::Sine {
                train_tasks,
                test_tasks,
            } => MetaDataset::sine(self.seed, *train_tasks, *test_tasks)?,
            TaskConfig::Blobs {
                train_tasks,
                test_tasks,
                ..
            } => MetaDataset::blobs(
                self.seed,
                &self.blob_spec().expect("blobs family"),
                *train_tasks,
                *test_tasks,
            )?,
            TaskConfig::Csv {
                train,
                test,
                schema,
            } => {
                let load = |paths: &[PathBuf]| {
                    paths
                        .iter()
                        .map(|p| load_csv_task(p, schema))
                        .collect::<losslearn::Result<Vec<_>>>()
                };
                MetaDataset::new(load(train)?, load(test)?)?
            }
        };
        Ok(ds)
    }

    /// The run directory: `output_dir` if absolute, otherwise under the root
    /// from the environment (default `runs`).
    pub fn output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(format!("{}-seed{}", self.method.name(), self.seed)),
        }
    }
}

fn field(name: &str, message: &str) -> CliError {
    CliError::from(losslearn::Error::config(name, message))
}

fn prefixed(prefix: &str, e: losslearn::Error) -> CliError {
    match e {
        losslearn::Error::Config { field, message } => CliError::from(losslearn::Error::config(
            format!("{prefix}.{field}"),
            message,
        )),
        other => CliError::from(other),
    }
}

fn task_counts(train: usize, test: usize) -> Result<(), CliError> {
    if train == 0 {
        return Err(field("task.train_tasks", "must be positive"));
    }
    if test == 0 {
        return Err(field("task.test_tasks", "must be positive"));
    }
    Ok(())
}
