//! Task families and meta-datasets.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::learner::TaskLossKind;
use crate::scalar::Scalar;
use crate::seed::{self, Domain};

pub const SINE_AMPLITUDE: (f64, f64) = (0.2, 5.0);
pub const SINE_PHASE: (f64, f64) = (-PI, PI);
pub const SINE_TRAIN_RANGE: (f64, f64) = (-2.0, 2.0);
pub const SINE_TEST_RANGE: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binary,
    Multiclass,
}

impl TaskKind {
    pub fn loss(self) -> TaskLossKind {
        match self {
            TaskKind::Regression => TaskLossKind::Mse,
            TaskKind::Binary => TaskLossKind::Bce,
            TaskKind::Multiclass => TaskLossKind::Cce,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Gaussian-blob classification family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of the class means around the origin.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::config(
                "separation",
                "must be finite and non-negative",
            ));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(Error::config("spread", "must be finite and non-negative"));
        }
        if self.separation == 0.0 && self.spread == 0.0 {
            return Err(Error::config(
                "separation",
                "zero separation with zero spread gives identical points",
            ));
        }
        Ok(())
    }
}

/// Column layout of a CSV task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    pub kind: TaskKind,
    /// Number of classes for multiclass tasks.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone)]
enum Source {
    Sine {
        amplitude: f64,
        phase: f64,
        range: (f64, f64),
    },
    Blobs {
        means: Vec<Vec<f64>>,
        spread: f64,
    },
    Table {
        features: Arc<Vec<Vec<f64>>>,
        targets: Arc<Vec<Vec<f64>>>,
    },
}

/// One task: an immutable description sampled with an explicit rng.
#[derive(Debug, Clone)]
pub struct Task {
    name: String,
    kind: TaskKind,
    d_in: usize,
    outputs: usize,
    source: Source,
}

impl Task {
    pub fn sine(amplitude: f64, phase: f64, range: (f64, f64)) -> Task {
        Task {
            name: format!("sine(A={amplitude:.4}, p={phase:.4})"),
            kind: TaskKind::Regression,
            d_in: 1,
            outputs: 1,
            source: Source::Sine {
                amplitude,
                phase,
                range,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Amplitude and phase of a sine task.
    pub fn sine_parameters(&self) -> Option<(f64, f64)> {
        match self.source {
            Source::Sine {
                amplitude, phase, ..
            } => Some((amplitude, phase)),
            _ => None,
        }
    }

    pub fn blob_means(&self) -> Option<&[Vec<f64>]> {
        match &self.source {
            Source::Blobs { means, .. } => Some(means),
            _ => None,
        }
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize) -> Batch<T> {
        let mut x = Vec::with_capacity(batch_size * self.d_in);
        let mut y = Vec::with_capacity(batch_size * self.outputs);
        match &self.source {
            Source::Sine {
                amplitude,
                phase,
                range,
            } => {
                let dist = Uniform::new_inclusive(range.0, range.1).expect("valid range");
                for _ in 0..batch_size {
                    let xi = dist.sample(rng);
                    x.push(T::of(xi));
                    y.push(T::of(amplitude * (xi + phase).sin()));
                }
            }
            Source::Blobs { means, spread } => {
                for _ in 0..batch_size {
                    let class = rng.random_range(0..means.len());
                    for &m in &means[class] {
                        let z: f64 = StandardNormal.sample(rng);
                        x.push(T::of(m + spread * z));
                    }
                    y.extend(
                        (0..means.len()).map(|c| if c == class { T::one() } else { T::zero() }),
                    );
                }
            }
            Source::Table { features, targets } => {
                for _ in 0..batch_size {
                    let r = rng.random_range(0..features.len());
                    x.extend(features[r].iter().map(|&v| T::of(v)));
                    y.extend(targets[r].iter().map(|&v| T::of(v)));
                }
            }
        }
        Batch {
            x: Tensor::new(batch_size, self.d_in, x),
            y: Tensor::new(batch_size, self.outputs, y),
        }
    }
}

/// Sine tasks with amplitude `U[0.2, 5]` and phase `U[−π, π]`, sampled on `x_range`.
pub fn sample_sine_tasks<R: Rng + ?Sized>(
    rng: &mut R,
    n_tasks: usize,
    x_range: (f64, f64),
) -> Result<Vec<Task>> {
    if n_tasks == 0 {
        return Err(Error::config("tasks", "need at least one task"));
    }
    if !(x_range.0.is_finite() && x_range.1.is_finite() && x_range.0 <= x_range.1) {
        return Err(Error::config("x_range", "must be a finite interval"));
    }
    let amp = Uniform::new_inclusive(SINE_AMPLITUDE.0, SINE_AMPLITUDE.1).expect("valid range");
    let phase = Uniform::new_inclusive(SINE_PHASE.0, SINE_PHASE.1).expect("valid range");
    Ok((0..n_tasks)
        .map(|_| {
            let a = amp.sample(rng);
            let p = phase.sample(rng);
            Task::sine(a, p, x_range)
        })
        .collect())
}

/// A blob task with freshly drawn class means.
pub fn make_synthetic_classification<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &BlobSpec,
) -> Result<Task> {
    spec.validate()?;
    let normal = Normal::new(0.0, spec.separation)
        .map_err(|e| Error::config("separation", e.to_string()))?;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| normal.sample(rng)).collect())
        .collect();
    Ok(Task {
        name: format!("blobs(C={}, d={})", spec.classes, spec.dim),
        kind: TaskKind::Multiclass,
        d_in: spec.dim,
        outputs: spec.classes,
        source: Source::Blobs {
            means,
            spread: spec.spread,
        },
    })
}

/// Reads a headered CSV file into a task sampled uniformly with replacement.
pub fn load_csv_task(path: &Path, schema: &CsvSchema) -> Result<Task> {
    let ctx = path.display().to_string();
    if schema.features.is_empty() {
        return Err(Error::config(
            "schema.features",
            "need at least one feature column",
        ));
    }
    let outputs = match (schema.kind, schema.classes) {
        (TaskKind::Multiclass, Some(c)) if c >= 2 => c,
        (TaskKind::Multiclass, _) => {
            return Err(Error::config(
                "schema.classes",
                "multiclass tasks need classes >= 2",
            ));
        }
        _ => 1,
    };
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::Task(format!("{ctx}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Task(format!("{ctx}: cannot read header: {e}")))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Task(format!("{ctx}: unknown column '{name}'")))
    };
    let feature_idx: Vec<usize> = schema
        .features
        .iter()
        .map(|n| column(n))
        .collect::<Result<_>>()?;
    let label_idx = column(&schema.label)?;

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| Error::Task(format!("{ctx}: row {line}: {e}")))?;
        let field = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).ok_or_else(|| {
                Error::Task(format!("{ctx}: row {line}, column '{name}': missing value"))
            })?;
            let v: f64 = raw.trim().parse().map_err(|_| {
                Error::Task(format!(
                    "{ctx}: row {line}, column '{name}': '{raw}' is not a number"
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Task(format!(
                    "{ctx}: row {line}, column '{name}': non-finite value"
                )));
            }
            Ok(v)
        };
        let row: Vec<f64> = feature_idx
            .iter()
            .zip(&schema.features)
            .map(|(&idx, name)| field(idx, name))
            .collect::<Result<_>>()?;
        let label = field(label_idx, &schema.label)?;
        let target = match schema.kind {
            TaskKind::Regression => vec![label],
            TaskKind::Binary => {
                if label != 0.0 && label != 1.0 {
                    return Err(Error::Task(format!(
                        "{ctx}: row {line}, column '{}': binary label must be 0 or 1, got {label}",
                        schema.label
                    )));
                }
                vec![label]
            }
            TaskKind::Multiclass => {
                if label.fract() != 0.0 || label < 0.0 || label >= outputs as f64 {
                    return Err(Error::Task(format!(
                        "{ctx}: row {line}, column '{}': label {label} outside 0..{outputs}",
                        schema.label
                    )));
                }
                (0..outputs)
                    .map(|c| if c == label as usize { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        features.push(row);
        targets.push(target);
    }
    if features.is_empty() {
        return Err(Error::Task(format!("{ctx}: no data rows")));
    }
    if schema.standardize {
        standardize(&mut features);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| ctx.clone());
    Ok(Task {
        name,
        kind: schema.kind,
        d_in: schema.features.len(),
        outputs,
        source: Source::Table {
            features: Arc::new(features),
            targets: Arc::new(targets),
        },
    })
}

/// Zero mean, unit variance per column (constant columns are only centred).
fn standardize(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in rows.iter_mut() {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

/// Meta-training and meta-testing tasks from one family.
#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub train: Vec<Task>,
    pub test: Vec<Task>,
}

impl MetaDataset {
    /// Train and test tasks come from separate rng streams; test tasks are
    /// sampled on the wider input range.
    pub fn sine(seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        let train = sample_sine_tasks(
            &mut seed::stream(seed, Domain::TrainTasks, 0, 0),
            n_train,
            SINE_TRAIN_RANGE,
        )?;
        let test = sample_sine_tasks(
            &mut seed::stream(seed, Domain::TestTasks, 0, 0),
            n_test,
            SINE_TEST_RANGE,
        )?;
        Ok(MetaDataset { train, test })
    }

    pub fn blobs(seed: u64, spec: &BlobSpec, n_train: usize, n_test: usize) -> Result<Self> {
        if n_train == 0 || n_test == 0 {
            return Err(Error::config(
                "tasks",
                "need at least one train and one test task",
            ));
        }
        let mut tr = seed::stream(seed, Domain::TrainTasks, 0, 0);
        let mut te = seed::stream(seed, Domain::TestTasks, 0, 0);
        let train = (0..n_train)
            .map(|_| make_synthetic_classification(&mut tr, spec))
            .collect::<Result<_>>()?;
        let test = (0..n_test)
            .map(|_| make_synthetic_classification(&mut te, spec))
            .collect::<Result<_>>()?;
        Ok(MetaDataset { train, test })
    }

    pub fn new(train: Vec<Task>, test: Vec<Task>) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::config("tasks", "need at least one training task"))?;
        if test.is_empty() {
            return Err(Error::config("tasks", "need at least one test task"));
        }
        for t in train.iter().chain(&test) {
            if (t.kind, t.d_in, t.outputs) != (first.kind, first.d_in, first.outputs) {
                return Err(Error::config(
                    "tasks",
                    format!("task '{}' does not match the others' shape", t.name),
                ));
            }
        }
        Ok(MetaDataset { train, test })
    }

    pub fn kind(&self) -> TaskKind {
        self.train[0].kind
    }

    pub fn d_in(&self) -> usize {
        self.train[0].d_in
    }

    pub fn outputs(&self) -> usize {
        self.train[0].outputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::learner::{
        forward_graph, performance_metric, task_loss_graph, BaseLearner, MlpSpec,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sine_value_at_origin() {
        let t = Task::sine(1.0, 0.0, (0.0, 0.0));
        let b: Batch<f64> = t.sample(&mut rng(0), 3);
        assert_eq!(b.y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sine_parameters_stay_in_range() {
        let tasks = sample_sine_tasks(&mut rng(1), 100_000, SINE_TRAIN_RANGE).unwrap();
        for t in &tasks {
            let (a, p) = t.sine_parameters().unwrap();
            assert!((0.2..=5.0).contains(&a));
            assert!((-PI..=PI).contains(&p));
        }
        let mut r = rng(2);
        for t in tasks.iter().take(50) {
            let (a, _) = t.sine_parameters().unwrap();
            let b: Batch<f64> = t.sample(&mut r, 20);
            assert!(b.y.data().iter().all(|v| v.abs() <= a));
            assert!(b.x.data().iter().all(|v| (-2.0..=2.0).contains(v)));
        }
        assert!(sample_sine_tasks(&mut r, 0, SINE_TRAIN_RANGE).is_err());
        assert!(sample_sine_tasks(&mut r, 1, (0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = Task::sine(2.0, 0.5, SINE_TEST_RANGE);
        let a: Batch<f64> = t.sample(&mut rng(7), 10);
        let b: Batch<f64> = t.sample(&mut rng(7), 10);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn meta_dataset_splits_use_distinct_streams() {
        let ds = MetaDataset::sine(3, 5, 5).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (5, 5));
        for (a, b) in ds.train.iter().zip(&ds.test) {
            assert_ne!(a.sine_parameters(), b.sine_parameters());
        }
        let again = MetaDataset::sine(3, 5, 5).unwrap();
        assert_eq!(
            ds.train[2].sine_parameters(),
            again.train[2].sine_parameters()
        );
    }

    #[test]
    fn blob_labels_are_one_hot_and_means_differ() {
        let spec = BlobSpec {
            classes: 3,
            dim: 2,
            separation: 3.0,
            spread: 0.5,
        };
        let a = make_synthetic_classification(&mut rng(1), &spec).unwrap();
        let b = make_synthetic_classification(&mut rng(2), &spec).unwrap();
        assert_ne!(a.blob_means(), b.blob_means());
        let batch: Batch<f64> = a.sample(&mut rng(3), 64);
        assert_eq!(batch.y.shape(), (64, 3));
        assert_eq!(batch.x.shape(), (64, 2));
        for i in 0..64 {
            assert_eq!(batch.y.row(i).iter().sum::<f64>(), 1.0);
        }
        let degenerate = BlobSpec {
            separation: 0.0,
            spread: 0.0,
            ..spec
        };
        assert!(make_synthetic_classification(&mut rng(1), &degenerate).is_err());
        let one_class = BlobSpec { classes: 1, ..spec };
        assert!(make_synthetic_classification(&mut rng(1), &one_class).is_err());
    }

    #[test]
    fn separated_blobs_are_learnable() {
        let spec = BlobSpec {
            classes: 2,
            dim: 2,
            separation: 5.0,
            spread: 0.5,
        };
        let mut r = rng(11);
        let task = make_synthetic_classification(&mut r, &spec).unwrap();
        let mlp = MlpSpec::new(&[2, 2], TaskLossKind::Cce).unwrap();
        let mut learner = BaseLearner::<f64>::init_glorot(&mlp, &mut r);
        for _ in 0..200 {
            let batch: Batch<f64> = task.sample(&mut r, 32);
            let g = Graph::new();
            let params = learner.bind(&g, true);
            let f = forward_graph(&mlp, &g, &params, g.constant(batch.x));
            let loss = task_loss_graph(&g, TaskLossKind::Cce, g.constant(batch.y), f);
            let grads: Vec<_> = g
                .grad(loss, &params, false)
                .unwrap()
                .iter()
                .map(|&v| g.value(v).clone())
                .collect();
            learner.sgd_step(&grads, 0.1).unwrap();
        }
        let test: Batch<f64> = task.sample(&mut r, 1000);
        let er = performance_metric(
            crate::learner::MetricKind::ErrorRate,
            &test.y,
            &learner.predict(&test.x).unwrap(),
        )
        .unwrap();
        assert!(er < 0.05, "error rate {er}");
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn schema(kind: TaskKind, classes: Option<usize>) -> CsvSchema {
        CsvSchema {
            features: vec!["x1".into(), "x2".into()],
            label: "label".into(),
            kind,
            classes,
            standardize: false,
        }
    }

    #[test]
    fn csv_schema_is_applied() {
        let f = write_csv("x1,x2,label\n0.5,1.0,0\n1.5,-2.0,2\n3.0,0.0,1\n");
        let task = load_csv_task(f.path(), &schema(TaskKind::Multiclass, Some(3))).unwrap();
        assert_eq!((task.d_in(), task.outputs()), (2, 3));
        let batch: Batch<f64> = task.sample(&mut rng(0), 10);
        assert_eq!(batch.x.shape(), (10, 2));
        assert_eq!(batch.y.shape(), (10, 3));
    }

    #[test]
    fn csv_errors_carry_context() {
        let f = write_csv("x1,x2,label\n0.5,1.0,0\n1.5,-2.0,5\n");
        let err = load_csv_task(f.path(), &schema(TaskKind::Multiclass, Some(3)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 3") && err.contains("label"), "{err}");

        let f = write_csv("x1,x2,label\n0.5,abc,0\n");
        let err = load_csv_task(f.path(), &schema(TaskKind::Multiclass, Some(3)))
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("row 2") && err.contains("'x2'") && err.contains("abc"),
            "{err}"
        );

        let f = write_csv("x1,x3,label\n0.5,1,0\n");
        let err = load_csv_task(f.path(), &schema(TaskKind::Multiclass, Some(3)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown column 'x2'"), "{err}");

        let err = load_csv_task(
            Path::new("/nonexistent/file.csv"),
            &schema(TaskKind::Regression, None),
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/file.csv"));

        let f = write_csv("x1,x2,label\n0.5,1,0.5\n");
        assert!(load_csv_task(f.path(), &schema(TaskKind::Binary, None)).is_err());
    }

    #[test]
    fn csv_standardization() {
        let f = write_csv("x1,x2,label\n1,5,0.1\n2,5,0.2\n3,5,0.3\n");
        let mut s = schema(TaskKind::Regression, None);
        s.standardize = true;
        let task = load_csv_task(f.path(), &s).unwrap();
        let batch: Batch<f64> = task.sample(&mut rng(1), 200);
        let mean = batch.x.data().iter().step_by(2).sum::<f64>() / 200.0;
        assert!(mean.abs() < 0.3);
        assert!(batch.x.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }
}
