//! Bilevel training of loss networks, fitness evaluation, meta-testing and
//! the comparison methods.

use std::marker::PhantomData;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::expr::LossExpr;
use crate::gp::{self, Evaluation, Evaluator, GenerationRecord, GpConfig, SearchResult};
use crate::learner::{
    forward_graph, head_graph, init_glorot, performance_metric, sgd_step_graph, task_loss_graph,
    task_loss_per_sample, BaseLearner, MlpSpec, TaskLossKind,
};
use crate::lossnet::{ExportedLoss, FeedForwardLoss, LearnableLoss, MetaLossNetwork};
use crate::scalar::Scalar;
use crate::seed::{self, Domain};
use crate::tasks::{Batch, MetaDataset, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Meta steps (φ updates) per inner optimization.
    pub s_meta: usize,
    /// Base steps per meta step.
    pub s_base: usize,
    /// Base steps when evaluating fitness or meta-testing.
    pub s_base_eval: usize,
    /// Base learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub eta: f64,
    pub batch_size: usize,
    /// Batch used to measure performance.
    pub eval_batch_size: usize,
    /// Trailing base steps through which φ-gradients are tracked.
    pub unroll_window: usize,
    /// Hidden layer widths of the base learner.
    pub hidden: Vec<usize>,
    /// Hidden layer widths of the fixed-architecture loss network.
    pub ml3_hidden: Vec<usize>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            s_meta: 100,
            s_base: 50,
            s_base_eval: 500,
            alpha: 1e-3,
            eta: 1e-3,
            batch_size: 100,
            eval_batch_size: 1000,
            unroll_window: 1,
            hidden: vec![40, 40],
            ml3_hidden: FeedForwardLoss::<f64>::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("meta.{name}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("s_meta", self.s_meta)?;
        positive("s_base", self.s_base)?;
        positive("s_base_eval", self.s_base_eval)?;
        positive("batch_size", self.batch_size)?;
        positive("eval_batch_size", self.eval_batch_size)?;
        positive("unroll_window", self.unroll_window)?;
        if self.unroll_window > self.s_base {
            return Err(Error::config(
                "meta.unroll_window",
                "must not exceed s_base",
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("meta.alpha", "must be finite and positive"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("meta.eta", "must be finite and non-negative"));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(
                format!("meta.hidden[{i}]"),
                "must be positive",
            ));
        }
        if self.ml3_hidden.is_empty() || self.ml3_hidden.contains(&0) {
            return Err(Error::config(
                "meta.ml3_hidden",
                "need at least one positive width",
            ));
        }
        Ok(())
    }
}

/// The task loss itself, as a loss with no trainable weights.
#[derive(Debug, Clone, Copy)]
pub struct TaskLoss {
    pub kind: TaskLossKind,
}

impl<T: Scalar> LearnableLoss<T> for TaskLoss {
    fn parameter_count(&self) -> usize {
        0
    }

    fn phi(&self) -> Vec<T> {
        Vec::new()
    }

    fn set_phi(&mut self, phi: &[T]) -> Result<()> {
        if phi.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract("the task loss has no weights".into()))
        }
    }

    fn bind(&self, _g: &Graph<T>, _phi: &[T], _trainable: bool) -> Vec<Var> {
        Vec::new()
    }

    fn per_sample(&self, g: &Graph<T>, _phi: &[Var], y: Var, f: Var) -> Var {
        task_loss_per_sample(g, self.kind, y, f)
    }
}

fn diverged(what: &str) -> Error {
    Error::Diverged(what.to_string())
}

/// One SGD step on θ with the loss weights frozen at `phi`. Returns the loss
/// value before the step.
///
/// Only the output head and the loss go through a graph; the MLP is run and
/// differentiated directly.
pub fn base_step<T: Scalar>(
    spec: &MlpSpec,
    theta: &mut [Tensor<T>],
    loss: &dyn LearnableLoss<T>,
    phi: &[T],
    batch: Batch<T>,
    alpha: T,
) -> Result<T> {
    let per_layer = if spec.bias { 2 } else { 1 };
    let layers = spec.layers();
    // inputs to each layer; hidden ones are post-ReLU
    let mut hs: Vec<Tensor<T>> = Vec::with_capacity(layers);
    hs.push(batch.x);
    let mut z = Tensor::zeros(0, 0);
    for l in 0..layers {
        z = hs[l].matmul(&theta[l * per_layer]);
        if spec.bias {
            z.add_row_assign(&theta[l * per_layer + 1]);
        }
        if l + 1 < layers {
            hs.push(z.map(|v| v.max(T::zero())));
        }
    }

    let (value, mut dz) = {
        let g = Graph::new();
        let phi_v = loss.bind(&g, phi, false);
        let zv = g.leaf(z);
        let f = head_graph(spec.head, &g, zv);
        let m = loss.loss(&g, &phi_v, g.constant(batch.y), f);
        let value = g.item(m);
        if !value.is_finite() {
            return Err(diverged("non-finite learned loss"));
        }
        let d = g.grad(m, &[zv], false)?[0];
        let dz = g.value(d).clone();
        (value, dz)
    };

    for l in (0..layers).rev() {
        let h = &hs[l];
        let dw = h.matmul_tn(&dz);
        let db = spec.bias.then(|| dz.sum_rows());
        if l > 0 {
            let dh = dz.matmul_nt(&theta[l * per_layer]);
            dz = dh.zip_map(h, |d, a| if a > T::zero() { d } else { T::zero() });
        }
        let mut updates = vec![(l * per_layer, dw)];
        if let Some(db) = db {
            updates.push((l * per_layer + 1, db));
        }
        for (i, d) in updates {
            let t = &mut theta[i];
            for (w, &gv) in t.data_mut().iter_mut().zip(d.data()) {
                *w = *w - alpha * gv;
            }
        }
    }
    if !theta.iter().all(Tensor::is_finite) {
        return Err(diverged("non-finite base learner weights"));
    }
    Ok(value)
}

/// Runs the base steps in `batches` from `theta` with gradient provenance kept
/// back to φ, then returns the task loss on the last batch and its gradient
/// with respect to φ.
pub fn unrolled_task_loss<T: Scalar>(
    spec: &MlpSpec,
    theta: &[Tensor<T>],
    loss: &dyn LearnableLoss<T>,
    phi: &[T],
    batches: &[Batch<T>],
    alpha: T,
) -> Result<(T, Vec<T>)> {
    let last = batches
        .last()
        .ok_or_else(|| Error::Contract("unrolled window needs at least one batch".into()))?;
    let g = Graph::new();
    let phi_v = loss.bind(&g, phi, true);
    let mut th: Vec<Var> = theta.iter().map(|t| g.leaf(t.clone())).collect();
    for b in batches {
        let f = forward_graph(spec, &g, &th, g.constant(b.x.clone()));
        let m = loss.loss(&g, &phi_v, g.constant(b.y.clone()), f);
        if !g.item(m).is_finite() {
            return Err(diverged("non-finite learned loss"));
        }
        let grads = g.grad(m, &th, true)?;
        th = sgd_step_graph(&g, &th, &grads, alpha);
    }
    let f = forward_graph(spec, &g, &th, g.constant(last.x.clone()));
    let lt = task_loss_graph(&g, spec.loss, g.constant(last.y.clone()), f);
    let value = g.item(lt);
    if !value.is_finite() {
        return Err(diverged("non-finite task loss"));
    }
    if phi.is_empty() {
        return Ok((value, Vec::new()));
    }
    let grads = g.grad(lt, &phi_v, false)?;
    Ok((value, loss.flatten(&g, &grads)))
}

/// Trains φ by unrolled differentiation: per meta step, each task gets a
/// fresh learner, `s_base` base steps (the last `unroll_window` tracked), and
/// contributes its task-loss gradient to a single φ update.
pub fn inner_optimize<T: Scalar, R: RngCore>(
    loss: &dyn LearnableLoss<T>,
    tasks: &[Task],
    spec: &MlpSpec,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<Vec<T>> {
    let mut phi = loss.phi();
    if tasks.is_empty() {
        return Err(Error::config("tasks", "need at least one training task"));
    }
    if cfg.eta == 0.0 || phi.is_empty() {
        return Ok(phi);
    }
    let alpha = T::of(cfg.alpha);
    let eta = T::of(cfg.eta);
    let free_steps = cfg.s_base - cfg.unroll_window;
    for _ in 0..cfg.s_meta {
        let mut total = vec![T::zero(); phi.len()];
        for task in tasks {
            let mut theta = init_glorot::<T, _>(rng, spec);
            for _ in 0..free_steps {
                base_step(
                    spec,
                    &mut theta,
                    loss,
                    &phi,
                    task.sample(rng, cfg.batch_size),
                    alpha,
                )?;
            }
            let window: Vec<Batch<T>> = (0..cfg.unroll_window)
                .map(|_| task.sample(rng, cfg.batch_size))
                .collect();
            let (_, grad) = unrolled_task_loss(spec, &theta, loss, &phi, &window, alpha)?;
            for (acc, g) in total.iter_mut().zip(grad) {
                *acc = *acc + g;
            }
        }
        for (w, g) in phi.iter_mut().zip(&total) {
            *w = *w - eta * *g;
        }
        if !phi.iter().all(|v| v.is_finite()) {
            return Err(diverged("non-finite loss weights"));
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    #[serde(with = "crate::nonfinite::scalar")]
    pub fitness: f64,
    #[serde(with = "crate::nonfinite::vec")]
    pub per_task: Vec<f64>,
    pub diverged: bool,
    pub seconds: f64,
    #[serde(default)]
    pub message: Option<String>,
}

/// Trains a fresh learner for `steps` steps, calling `log(step, learner)`
/// before the first step and after every step.
#[allow(clippy::too_many_arguments)]
fn train_learner<T: Scalar, R: RngCore>(
    spec: &MlpSpec,
    loss: &dyn LearnableLoss<T>,
    phi: &[T],
    task: &Task,
    cfg: &MetaConfig,
    steps: usize,
    rng: &mut R,
    mut log: impl FnMut(usize, &[Tensor<T>]) -> Result<()>,
) -> Result<Vec<Tensor<T>>> {
    let alpha = T::of(cfg.alpha);
    let mut theta = init_glorot::<T, _>(rng, spec);
    log(0, &theta)?;
    for s in 1..=steps {
        base_step(
            spec,
            &mut theta,
            loss,
            phi,
            task.sample(rng, cfg.batch_size),
            alpha,
        )?;
        log(s, &theta)?;
    }
    Ok(theta)
}

fn measure<T: Scalar>(spec: &MlpSpec, theta: &[Tensor<T>], batch: &Batch<T>) -> Result<f64> {
    let learner = BaseLearner::from_params(spec, theta.to_vec())?;
    let f = learner.predict(&batch.x)?;
    let v = performance_metric(spec.loss.metric(), &batch.y, &f)?.to_f64_lossy();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(diverged("non-finite performance"))
    }
}

/// Mean final performance over `tasks` after `s_base_eval` steps with φ frozen.
/// Never fails: any numerical failure yields `+∞` with `diverged` set.
pub fn evaluate_fitness<T: Scalar, R: RngCore>(
    loss: &dyn LearnableLoss<T>,
    tasks: &[Task],
    spec: &MlpSpec,
    cfg: &MetaConfig,
    rng: &mut R,
) -> FitnessReport {
    let start = Instant::now();
    let phi = loss.phi();
    let mut per_task = Vec::with_capacity(tasks.len());
    let outcome = (|| -> Result<()> {
        if tasks.is_empty() {
            return Err(Error::config("tasks", "need at least one training task"));
        }
        for task in tasks {
            let theta =
                train_learner(spec, loss, &phi, task, cfg, cfg.s_base_eval, rng, |_, _| {
                    Ok(())
                })?;
            let batch = task.sample(rng, cfg.eval_batch_size);
            per_task.push(measure(spec, &theta, &batch)?);
        }
        Ok(())
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => FitnessReport {
            fitness: per_task.iter().sum::<f64>() / per_task.len() as f64,
            per_task,
            diverged: false,
            seconds,
            message: None,
        },
        Err(e) => FitnessReport {
            fitness: f64::INFINITY,
            per_task,
            diverged: true,
            seconds,
            message: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// `(step, performance)`, starting at step 0.
    #[serde(with = "crate::nonfinite::points")]
    pub points: Vec<(usize, f64)>,
    pub diverged: bool,
}

impl Curve {
    pub fn final_value(&self) -> f64 {
        self.points.last().map(|p| p.1).unwrap_or(f64::NAN)
    }
}

/// Learning curve of a fresh learner trained with `loss` (φ frozen), measured
/// every `interval` steps and at the last step on one fixed held-out batch.
pub fn meta_test<T: Scalar, R: RngCore>(
    loss: &dyn LearnableLoss<T>,
    task: &Task,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    interval: usize,
    rng: &mut R,
) -> Curve {
    let interval = interval.max(1);
    let steps = cfg.s_base_eval;
    let held_out = task.sample::<T, _>(rng, cfg.eval_batch_size);
    let phi = loss.phi();
    let mut points = Vec::with_capacity(steps / interval + 2);
    let result = train_learner(spec, loss, &phi, task, cfg, steps, rng, |s, theta| {
        if s % interval == 0 || s == steps {
            points.push((s, measure(spec, theta, &held_out)?));
        }
        Ok(())
    });
    let diverged = result.is_err();
    if diverged {
        let mut next = points.last().map(|p| p.0 + 1).unwrap_or(0);
        while next <= steps {
            if next % interval == 0 || next == steps {
                points.push((next, f64::INFINITY));
            }
            next += 1;
        }
    }
    Curve { points, diverged }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Random,
    GpLfl,
    Ml3,
    Evomal,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Random,
        Method::GpLfl,
        Method::Ml3,
        Method::Evomal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Random => "random",
            Method::GpLfl => "gp_lfl",
            Method::Ml3 => "ml3",
            Method::Evomal => "evomal",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Everything shared by the methods of one run.
pub struct Experiment<'a> {
    pub dataset: &'a MetaDataset,
    pub spec: MlpSpec,
    pub meta: MetaConfig,
    pub gp: GpConfig,
    pub wrapper: bool,
    pub seed: u64,
    pub log_interval: usize,
    pub pool: Option<&'a rayon::ThreadPool>,
}

impl<'a> Experiment<'a> {
    pub fn new(
        dataset: &'a MetaDataset,
        meta: MetaConfig,
        gp: GpConfig,
        seed: u64,
    ) -> Result<Self> {
        meta.validate()?;
        gp.validate()?;
        let mut sizes = vec![dataset.d_in()];
        sizes.extend_from_slice(&meta.hidden);
        sizes.push(dataset.outputs());
        let spec = MlpSpec::new(&sizes, dataset.kind().loss())?;
        Ok(Experiment {
            dataset,
            spec,
            meta,
            gp,
            wrapper: true,
            seed,
            log_interval: 10,
            pool: None,
        })
    }

    pub fn with_wrapper(mut self, on: bool) -> Self {
        self.wrapper = on;
        self
    }

    pub fn with_log_interval(mut self, k: usize) -> Self {
        self.log_interval = k.max(1);
        self
    }

    pub fn with_pool(mut self, pool: &'a rayon::ThreadPool) -> Self {
        self.pool = Some(pool);
        self
    }

    /// Curves on every train and test task. Streams depend only on the seed,
    /// split and task, so all methods see the same initializations and data.
    pub fn meta_test_all<T: Scalar>(&self, loss: &dyn LearnableLoss<T>) -> Vec<CurveRecord> {
        let mut out = self.meta_test_split(loss, Split::Train);
        out.extend(self.meta_test_split(loss, Split::Test));
        out
    }

    pub fn meta_test_split<T: Scalar>(
        &self,
        loss: &dyn LearnableLoss<T>,
        split: Split,
    ) -> Vec<CurveRecord> {
        let tasks = match split {
            Split::Train => &self.dataset.train,
            Split::Test => &self.dataset.test,
        };
        tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let mut rng = seed::stream(self.seed, Domain::MetaTest, split as u64, i as u64);
                CurveRecord {
                    split,
                    task_id: i,
                    curve: meta_test(
                        loss,
                        task,
                        &self.spec,
                        &self.meta,
                        self.log_interval,
                        &mut rng,
                    ),
                }
            })
            .collect()
    }

    fn unit_evaluator<T: Scalar>(&self) -> SymbolicEvaluator<'_, 'a, T> {
        SymbolicEvaluator {
            exp: self,
            optimize: false,
            _scalar: PhantomData,
        }
    }

    fn optimizing_evaluator<T: Scalar>(&self) -> SymbolicEvaluator<'_, 'a, T> {
        SymbolicEvaluator {
            exp: self,
            optimize: true,
            _scalar: PhantomData,
        }
    }

    /// Scores one expression the way the search does, with an explicit stream.
    pub fn evaluate_candidate<T: Scalar>(
        &self,
        expr: &LossExpr,
        optimize: bool,
        rng: &mut seed::Rng,
    ) -> Evaluation {
        let e = if optimize {
            self.optimizing_evaluator::<T>()
        } else {
            self.unit_evaluator::<T>()
        };
        gp::guarded_evaluate(&e, expr, rng)
    }

    /// Rebuilds the network of a symbolic candidate with the given weights.
    pub fn network<T: Scalar>(&self, expr: &LossExpr, phi: &[f64]) -> Result<MetaLossNetwork<T>> {
        let phi: Vec<T> = phi.iter().map(|&v| T::of(v)).collect();
        MetaLossNetwork::with_phi(expr, &phi, self.wrapper)
    }
}

/// Candidate scoring for the symbolic methods: unit weights, or sampled
/// weights refined by [`inner_optimize`].
struct SymbolicEvaluator<'e, 'a, T> {
    exp: &'e Experiment<'a>,
    optimize: bool,
    _scalar: PhantomData<fn() -> T>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

impl<T: Scalar> Evaluator for SymbolicEvaluator<'_, '_, T> {
    fn evaluate(&self, expr: &LossExpr, rng: &mut seed::Rng) -> Evaluation {
        let start = Instant::now();
        let exp = self.exp;
        let inner_seed = rng.next_u64();
        let eval_seed = rng.next_u64();
        let mut net = if self.optimize {
            MetaLossNetwork::<T>::transpose_and_parameterize(expr, rng)
        } else {
            MetaLossNetwork::<T>::unit(expr)
        };
        net.set_wrapper(exp.wrapper);
        let phi_init = net.phi();
        if self.optimize {
            let mut inner_rng = seed::Rng::seed_from_u64(inner_seed);
            let trained = inner_optimize(
                &net,
                &exp.dataset.train,
                &exp.spec,
                &exp.meta,
                &mut inner_rng,
            )
            .and_then(|phi| net.set_phi(&phi));
            if let Err(e) = trained {
                let mut out = Evaluation::sentinel(e.to_string());
                out.phi_init = to_f64(&phi_init);
                out.eval_seed = eval_seed;
                out.seconds = start.elapsed().as_secs_f64();
                return out;
            }
        }
        let mut eval_rng = seed::Rng::seed_from_u64(eval_seed);
        let report = evaluate_fitness(
            &net,
            &exp.dataset.train,
            &exp.spec,
            &exp.meta,
            &mut eval_rng,
        );
        Evaluation {
            fitness: report.fitness,
            diverged: report.diverged,
            phi_init: to_f64(&phi_init),
            phi: to_f64(&net.phi()),
            per_task: report.per_task,
            seconds: start.elapsed().as_secs_f64(),
            message: report.message,
            eval_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub split: Split,
    pub task_id: usize,
    pub curve: Curve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSummary {
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
    pub archive_hits: usize,
    pub submitted: usize,
    pub best_expression: String,
    pub best: Evaluation,
}

impl SearchSummary {
    fn from_result(r: &SearchResult) -> Self {
        SearchSummary {
            history: r.history.clone(),
            evaluations: r.evaluations,
            archive_hits: r.archive_hits,
            submitted: r.submitted,
            best_expression: r.best.to_sexp(),
            best: r.best_evaluation.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub key: String,
    pub expression: String,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub search: Option<SearchSummary>,
    pub loss: Option<ExportedLoss>,
    /// Fitness of the final loss on the training tasks.
    pub train_fitness: Option<FitnessReport>,
    pub curves: Vec<CurveRecord>,
    pub candidates: Vec<CandidateReport>,
    pub seconds: f64,
}

impl MethodRun {
    /// Mean over tasks of the last curve value on `split`.
    pub fn final_metric(&self, split: Split) -> f64 {
        let finals: Vec<f64> = self
            .curves
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.curve.final_value())
            .collect();
        finals.iter().sum::<f64>() / finals.len() as f64
    }
}

fn candidates(result: &SearchResult) -> Vec<CandidateReport> {
    let mut out: Vec<CandidateReport> = result
        .archive
        .entries()
        .map(|(k, e)| CandidateReport {
            key: k.clone(),
            expression: e.expr.to_sexp(),
            evaluation: e.evaluation.clone(),
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

/// Runs one comparison method end to end: search or training as applicable,
/// then meta-testing of the resulting loss.
pub fn run_method<T: Scalar>(method: Method, exp: &Experiment<'_>) -> Result<MethodRun> {
    let start = Instant::now();
    let train = &exp.dataset.train;
    let mut run = MethodRun {
        method,
        seed: exp.seed,
        search: None,
        loss: None,
        train_fitness: None,
        curves: Vec::new(),
        candidates: Vec::new(),
        seconds: 0.0,
    };
    let final_loss: Box<dyn LearnableLoss<T>> = match method {
        Method::Baseline => Box::new(TaskLoss {
            kind: exp.spec.loss,
        }),
        Method::Random | Method::GpLfl | Method::Evomal => {
            let result = match method {
                Method::Random => {
                    gp::random_search(&exp.gp, &exp.unit_evaluator::<T>(), exp.seed, exp.pool)?
                }
                Method::GpLfl => {
                    gp::evolve(&exp.gp, &exp.unit_evaluator::<T>(), exp.seed, exp.pool)?
                }
                _ => gp::evolve(
                    &exp.gp,
                    &exp.optimizing_evaluator::<T>(),
                    exp.seed,
                    exp.pool,
                )?,
            };
            let best = &result.best_evaluation;
            let phi = if best.phi.is_empty() {
                vec![1.0; result.best.node_count() - 1]
            } else {
                best.phi.clone()
            };
            let net = exp.network::<T>(&result.best, &phi)?;
            run.train_fitness = Some(FitnessReport {
                fitness: best.fitness,
                per_task: best.per_task.clone(),
                diverged: best.diverged,
                seconds: best.seconds,
                message: best.message.clone(),
            });
            run.search = Some(SearchSummary::from_result(&result));
            run.candidates = candidates(&result);
            run.loss = Some(net.export());
            Box::new(net)
        }
        Method::Ml3 => {
            let mut init_rng = seed::stream(exp.seed, Domain::Ml3, 0, 0);
            let mut net = FeedForwardLoss::<T>::glorot(&mut init_rng, &exp.meta.ml3_hidden);
            let mut inner_rng = seed::stream(exp.seed, Domain::Ml3, 1, 0);
            let trained = inner_optimize(&net, train, &exp.spec, &exp.meta, &mut inner_rng);
            let message = match trained.and_then(|phi| net.set_phi(&phi)) {
                Ok(()) => None,
                Err(e) => {
                    log::warn!("fixed loss network training diverged: {e}");
                    Some(e.to_string())
                }
            };
            let mut eval_rng = seed::stream(exp.seed, Domain::Ml3, 2, 0);
            let mut report = evaluate_fitness(&net, train, &exp.spec, &exp.meta, &mut eval_rng);
            if message.is_some() {
                report.diverged = true;
                report.message = message;
            }
            run.train_fitness = Some(report);
            run.loss = Some(net.export());
            Box::new(net)
        }
    };
    run.curves = exp.meta_test_all(final_loss.as_ref());
    run.seconds = start.elapsed().as_secs_f64();
    Ok(run)
}
