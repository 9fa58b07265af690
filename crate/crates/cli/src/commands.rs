//! The `meta-train` and `meta-test` commands.

use std::path::{Path, PathBuf};

use losslearn::expr::LossExpr;
use losslearn::lossnet::{ExportedLoss, LearnableLoss, MetaLossNetwork};
use losslearn::meta::{run_method, Experiment, Method, Split, TaskLoss};
use losslearn::tasks::MetaDataset;
use losslearn::Scalar;

use crate::config::{Precision, RunConfig};
use crate::output::{self, RunRecord};
use crate::CliError;

/// Reserved `--loss` value selecting the task loss itself.
pub const BASELINE: &str = "baseline";

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))
}

fn experiment<'a>(
    cfg: &RunConfig,
    dataset: &'a MetaDataset,
    pool: &'a rayon::ThreadPool,
) -> Result<Experiment<'a>, CliError> {
    Ok(
        Experiment::new(dataset, cfg.meta.clone(), cfg.gp.clone(), cfg.seed)?
            .with_wrapper(cfg.wrapper)
            .with_log_interval(cfg.log_interval)
            .with_pool(pool),
    )
}

/// Runs the configured method and writes its artifacts. Returns the run
/// directory.
pub fn meta_train(config_path: &Path) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = cfg.dataset()?;
    let pool = pool(cfg.workers)?;
    let exp = experiment(&cfg, &dataset, &pool)?;
    let dir = cfg.output_dir();
    log::info!(
        "{} seed {} ({} train / {} test tasks) -> {}",
        cfg.method.name(),
        cfg.seed,
        dataset.train.len(),
        dataset.test.len(),
        dir.display()
    );
    let run = match cfg.precision {
        Precision::F64 => run_method::<f64>(cfg.method, &exp)?,
        Precision::F32 => run_method::<f32>(cfg.method, &exp)?,
    };
    if run.curves.iter().any(|c| c.curve.diverged) {
        log::warn!("some meta-test curves diverged; recorded as +inf");
    }
    log::info!(
        "done in {:.1}s: final {} train {:.6} test {:.6}",
        run.seconds,
        exp.spec.loss.metric().name(),
        run.final_metric(Split::Train),
        run.final_metric(Split::Test)
    );
    let metric = exp.spec.loss.metric().name();
    output::write_run(&dir, &RunRecord::new(cfg, run), metric)?;
    Ok(dir)
}

/// A loss to meta-test: the baseline, an exported JSON loss, a bare
/// s-expression (unit weights), or a run directory holding one of those.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSource {
    Baseline,
    Exported(ExportedLoss),
    Expression(LossExpr),
}

impl LossSource {
    pub fn load(arg: &str) -> Result<Self, CliError> {
        if arg == BASELINE {
            return Ok(LossSource::Baseline);
        }
        let mut path = PathBuf::from(arg);
        if path.is_dir() {
            let weights = path.join(output::LOSS_WEIGHTS);
            let sexp = path.join(output::LOSS_SEXP);
            path = if weights.exists() {
                weights
            } else if sexp.exists() {
                sexp
            } else {
                return Err(CliError::Usage(format!(
                    "{} holds no {} or {}",
                    path.display(),
                    output::LOSS_WEIGHTS,
                    output::LOSS_SEXP
                )));
            };
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read loss {}: {e}", path.display())))?;
        let bad = |msg: String| CliError::Config(format!("loss file {}: {msg}", path.display()));
        if path.extension().is_some_and(|x| x == "json") {
            let loss: ExportedLoss = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            if let Some(expr) = loss.expression() {
                LossExpr::parse(expr).map_err(|e| bad(e.to_string()))?;
            }
            Ok(LossSource::Exported(loss))
        } else {
            LossExpr::parse(text.trim())
                .map(LossSource::Expression)
                .map_err(|e| bad(e.to_string()))
        }
    }

    fn build<T: Scalar>(
        &self,
        cfg: &RunConfig,
        exp: &Experiment<'_>,
    ) -> Result<Box<dyn LearnableLoss<T>>, CliError> {
        Ok(match self {
            LossSource::Baseline => Box::new(TaskLoss {
                kind: exp.spec.loss,
            }),
            LossSource::Exported(loss) => loss.build::<T>()?,
            LossSource::Expression(expr) => {
                let mut net = MetaLossNetwork::<T>::unit(expr);
                net.set_wrapper(cfg.wrapper);
                Box::new(net)
            }
        })
    }

    fn method_label(&self, cfg: &RunConfig) -> &'static str {
        match self {
            LossSource::Baseline => Method::Baseline.name(),
            _ => cfg.method.name(),
        }
    }
}

/// Meta-tests a frozen loss on the configured test tasks and appends the
/// curves to `curves.csv` in the run directory. Returns the CSV path.
pub fn meta_test(loss_arg: &str, config_path: &Path) -> Result<PathBuf, CliError> {
    let source = LossSource::load(loss_arg)?;
    let cfg = RunConfig::load(config_path)?;
    let dataset = cfg.dataset()?;
    let pool = pool(cfg.workers)?;
    let exp = experiment(&cfg, &dataset, &pool)?;
    let curves = match cfg.precision {
        Precision::F64 => {
            exp.meta_test_split(source.build::<f64>(&cfg, &exp)?.as_ref(), Split::Test)
        }
        Precision::F32 => {
            exp.meta_test_split(source.build::<f32>(&cfg, &exp)?.as_ref(), Split::Test)
        }
    };
    let rows = output::curve_rows(
        cfg.seed,
        source.method_label(&cfg),
        exp.spec.loss.metric().name(),
        &curves,
    );
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| crate::io_error(&dir, e))?;
    output::append_curves(&dir, &rows)
}
