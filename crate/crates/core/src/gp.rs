//! Generational genetic programming over loss expressions.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{generate_tree, ramped_half_and_half, GenMethod, LossExpr, Operator, Terminal};
use crate::seed::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub elitism_rate: f64,
    pub init_min_depth: usize,
    pub init_max_depth: usize,
    pub depth_cap: usize,
    pub mutation_depth: usize,
    /// Attempts at a variation that respects `depth_cap` before giving up.
    pub max_retries: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            population_size: 25,
            generations: 50,
            crossover_rate: 0.7,
            mutation_rate: 0.25,
            tournament_size: 4,
            elitism_rate: 0.05,
            init_min_depth: 2,
            init_max_depth: 6,
            depth_cap: 8,
            mutation_depth: 2,
            max_retries: 10,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(
                    format!("gp.{name}"),
                    format!("{v} is not in [0, 1]"),
                ))
            }
        };
        prob("crossover_rate", self.crossover_rate)?;
        prob("mutation_rate", self.mutation_rate)?;
        prob("elitism_rate", self.elitism_rate)?;
        if self.population_size == 0 {
            return Err(Error::config("gp.population_size", "must be positive"));
        }
        if self.tournament_size == 0 || self.tournament_size > self.population_size {
            return Err(Error::config(
                "gp.tournament_size",
                format!("must be in 1..={}", self.population_size),
            ));
        }
        if self.init_min_depth == 0 || self.init_min_depth > self.init_max_depth {
            return Err(Error::config(
                "gp.init_min_depth",
                "must be in 1..=init_max_depth",
            ));
        }
        if self.init_max_depth >= self.depth_cap {
            return Err(Error::config(
                "gp.init_max_depth",
                "must be below depth_cap",
            ));
        }
        if self.mutation_depth == 0 || self.mutation_depth > self.depth_cap {
            return Err(Error::config(
                "gp.mutation_depth",
                "must be in 1..=depth_cap",
            ));
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.elitism_rate * self.population_size as f64).ceil() as usize)
            .min(self.population_size)
    }

    /// Generations actually run; the initial population counts as the first.
    pub fn effective_generations(&self) -> usize {
        self.generations.max(1)
    }
}

/// Outcome of evaluating one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Lower is better; `+∞` marks a failed candidate.
    #[serde(with = "crate::nonfinite::scalar")]
    pub fitness: f64,
    pub diverged: bool,
    pub phi_init: Vec<f64>,
    pub phi: Vec<f64>,
    /// Performance on each training task.
    #[serde(with = "crate::nonfinite::vec")]
    pub per_task: Vec<f64>,
    pub seconds: f64,
    #[serde(default)]
    pub message: Option<String>,
    /// Seed of the stream used for the fitness measurement, so it can be
    /// repeated with other weights.
    #[serde(default)]
    pub eval_seed: u64,
}

impl Evaluation {
    pub fn sentinel(message: impl Into<String>) -> Self {
        Evaluation {
            fitness: f64::INFINITY,
            diverged: true,
            phi_init: Vec::new(),
            phi: Vec::new(),
            per_task: Vec::new(),
            seconds: 0.0,
            message: Some(message.into()),
            eval_seed: 0,
        }
    }
}

/// Scores a candidate expression. Implementations must be deterministic in
/// `(expr, rng)`.
pub trait Evaluator: Sync {
    fn evaluate(&self, expr: &LossExpr, rng: &mut seed::Rng) -> Evaluation;
}

impl<F> Evaluator for F
where
    F: Fn(&LossExpr, &mut seed::Rng) -> Evaluation + Sync,
{
    fn evaluate(&self, expr: &LossExpr, rng: &mut seed::Rng) -> Evaluation {
        self(expr, rng)
    }
}

#[derive(Debug, Clone)]
pub struct ArchiveEntry {
    pub expr: LossExpr,
    pub evaluation: Evaluation,
}

/// Evaluated candidates keyed by canonical form.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    entries: HashMap<String, ArchiveEntry>,
    hits: usize,
    evaluations: usize,
    submitted: usize,
}

/// Per-call counts from [`Archive::evaluate_population`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub evaluations: usize,
    pub hits: usize,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&ArchiveEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn submitted(&self) -> usize {
        self.submitted
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ArchiveEntry)> {
        self.entries.iter()
    }

    /// Fitness for every member of `population`. Keys already archived (or
    /// repeated within the batch) are not evaluated again. Each new candidate
    /// gets the rng stream `(seed, generation, index)`.
    pub fn evaluate_population<E: Evaluator + ?Sized>(
        &mut self,
        population: &[LossExpr],
        evaluator: &E,
        run_seed: u64,
        generation: u64,
        pool: Option<&rayon::ThreadPool>,
    ) -> (Vec<f64>, BatchStats) {
        let keys: Vec<String> = population.iter().map(LossExpr::canonical_key).collect();
        let mut todo: Vec<usize> = Vec::new();
        let mut stats = BatchStats::default();
        let mut pending: HashSet<&str> = HashSet::new();
        for (i, key) in keys.iter().enumerate() {
            if self.entries.contains_key(key) || pending.contains(key.as_str()) {
                stats.hits += 1;
            } else {
                pending.insert(key);
                todo.push(i);
            }
        }
        let run = || {
            todo.par_iter()
                .map(|&i| {
                    let mut rng = seed::stream(run_seed, Domain::Candidate, generation, i as u64);
                    guarded_evaluate(evaluator, &population[i], &mut rng)
                })
                .collect::<Vec<_>>()
        };
        let results = match pool {
            Some(p) => p.install(run),
            None => run(),
        };
        stats.evaluations = results.len();
        for (&i, evaluation) in todo.iter().zip(results) {
            self.entries.insert(
                keys[i].clone(),
                ArchiveEntry {
                    expr: population[i].clone(),
                    evaluation,
                },
            );
        }
        self.hits += stats.hits;
        self.evaluations += stats.evaluations;
        self.submitted += population.len();
        let fitness = keys
            .iter()
            .map(|k| self.entries[k].evaluation.fitness)
            .collect();
        (fitness, stats)
    }
}

/// Message prefix of sentinels produced by a caught panic.
pub const PANIC_PREFIX: &str = "panicked: ";

/// Runs the evaluator, turning panics and NaN fitness into the failure sentinel.
pub fn guarded_evaluate<E: Evaluator + ?Sized>(
    evaluator: &E,
    expr: &LossExpr,
    rng: &mut seed::Rng,
) -> Evaluation {
    let start = Instant::now();
    match catch_unwind(AssertUnwindSafe(|| evaluator.evaluate(expr, rng))) {
        Ok(mut e) => {
            if e.fitness.is_nan() {
                e.fitness = f64::INFINITY;
                e.diverged = true;
            }
            e
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "evaluation panicked".into());
            log::warn!("candidate {expr} aborted: {msg}");
            let mut e = Evaluation::sentinel(format!("{PANIC_PREFIX}{msg}"));
            e.seconds = start.elapsed().as_secs_f64();
            e
        }
    }
}

fn random_binary_over_arguments<R: Rng + ?Sized>(rng: &mut R) -> LossExpr {
    let op = *Operator::BINARY.choose(rng).expect("non-empty");
    let (f, y) = (
        LossExpr::terminal(Terminal::Pred),
        LossExpr::terminal(Terminal::Target),
    );
    if rng.random::<bool>() {
        LossExpr::binary(op, f, y)
    } else {
        LossExpr::binary(op, y, f)
    }
}

/// Replaces one uniformly chosen terminal by a random binary node over
/// `(f, y)` unless both arguments are already present.
pub fn enforce_arguments_constraint<R: Rng + ?Sized>(expr: &LossExpr, rng: &mut R) -> LossExpr {
    if expr.has_required_arguments() {
        return expr.clone();
    }
    let terminals = expr.terminal_indices();
    let at = *terminals.choose(rng).expect("every tree has a terminal");
    expr.replace_subtree(at, &random_binary_over_arguments(rng))
}

/// Like [`enforce_arguments_constraint`] but keeps the result within
/// `depth_cap`: only terminals above the cap are eligible, and when none is,
/// the parent of a random terminal is replaced instead.
pub fn enforce_arguments_constraint_capped<R: Rng + ?Sized>(
    expr: &LossExpr,
    rng: &mut R,
    depth_cap: usize,
) -> LossExpr {
    if expr.has_required_arguments() {
        return expr.clone();
    }
    let depths = expr.node_depths();
    let terminals = expr.terminal_indices();
    let eligible: Vec<usize> = terminals
        .iter()
        .copied()
        .filter(|&i| depths[i] < depth_cap)
        .collect();
    let at = match eligible.choose(rng) {
        Some(&i) => i,
        None => {
            let leaf = *terminals.choose(rng).expect("every tree has a terminal");
            parent_of(expr, leaf).unwrap_or(leaf)
        }
    };
    expr.replace_subtree(at, &random_binary_over_arguments(rng))
}

fn parent_of(expr: &LossExpr, index: usize) -> Option<usize> {
    (0..index)
        .rev()
        .find(|&p| expr.children(p).contains(&index))
}

/// Subtree exchange: a copy of `a` with a random subtree replaced by a random
/// subtree of `b`. Falls back to a copy of `a` if no attempt fits the cap.
pub fn one_point_crossover<R: Rng + ?Sized>(
    a: &LossExpr,
    b: &LossExpr,
    rng: &mut R,
    depth_cap: usize,
    max_retries: usize,
) -> LossExpr {
    for _ in 0..max_retries.max(1) {
        let i = rng.random_range(0..a.node_count());
        let j = rng.random_range(0..b.node_count());
        let child = a.replace_subtree(i, &b.subtree(j));
        if child.depth() <= depth_cap {
            return child;
        }
    }
    a.clone()
}

/// Replaces a random subtree by a fresh Grow tree of depth at most
/// `subtree_depth`.
pub fn uniform_mutation<R: Rng + ?Sized>(
    expr: &LossExpr,
    rng: &mut R,
    subtree_depth: usize,
    depth_cap: usize,
    max_retries: usize,
) -> LossExpr {
    for _ in 0..max_retries.max(1) {
        let i = rng.random_range(0..expr.node_count());
        let fresh = generate_tree(rng, GenMethod::Grow, subtree_depth);
        let child = expr.replace_subtree(i, &fresh);
        if child.depth() <= depth_cap {
            return child;
        }
    }
    expr.clone()
}

/// Index of the fittest of `size` members drawn with replacement; ties go to
/// the earliest draw.
pub fn tournament_select<R: Rng + ?Sized>(fitness: &[f64], size: usize, rng: &mut R) -> usize {
    assert!(!fitness.is_empty(), "tournament over an empty population");
    let mut best = rng.random_range(0..fitness.len());
    for _ in 1..size {
        let c = rng.random_range(0..fitness.len());
        if fitness[c] < fitness[best] {
            best = c;
        }
    }
    best
}

/// Indices of the `n` fittest members (stable for ties).
pub fn elite_indices(fitness: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
    order.truncate(n);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// 1-based; the initial population is generation 1.
    pub generation: usize,
    #[serde(with = "crate::nonfinite::scalar")]
    pub best_fitness: f64,
    /// Best fitness seen in any generation so far.
    #[serde(with = "crate::nonfinite::scalar")]
    pub best_so_far: f64,
    /// Mean over finite fitness values (`NaN` if none).
    #[serde(with = "crate::nonfinite::scalar")]
    pub mean_fitness: f64,
    pub diverged: usize,
    pub evaluations: usize,
    pub archive_hits: usize,
    pub best_expression: String,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: LossExpr,
    pub best_evaluation: Evaluation,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
    pub archive_hits: usize,
    pub submitted: usize,
    pub archive: Archive,
}

struct Tracker {
    history: Vec<GenerationRecord>,
    best: Option<(LossExpr, String, f64)>,
}

impl Tracker {
    fn record(&mut self, population: &[LossExpr], fitness: &[f64], stats: BatchStats) {
        let top = elite_indices(fitness, 1)[0];
        let better = match &self.best {
            None => true,
            Some((_, _, f)) => fitness[top] < *f,
        };
        if better {
            let e = population[top].clone();
            let key = e.canonical_key();
            self.best = Some((e, key, fitness[top]));
        }
        let finite: Vec<f64> = fitness.iter().copied().filter(|f| f.is_finite()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let rec = GenerationRecord {
            generation: self.history.len() + 1,
            best_fitness: fitness[top],
            best_so_far: self.best.as_ref().map(|b| b.2).unwrap_or(f64::INFINITY),
            mean_fitness: mean,
            diverged: fitness.len() - finite.len(),
            evaluations: stats.evaluations,
            archive_hits: stats.hits,
            best_expression: population[top].to_sexp(),
        };
        log::info!(
            "generation {}: best {:.6e} mean {:.6e} evaluations {} hits {}",
            rec.generation,
            rec.best_fitness,
            rec.mean_fitness,
            rec.evaluations,
            rec.archive_hits
        );
        self.history.push(rec);
    }

    fn finish(self, archive: Archive) -> SearchResult {
        let (best, key, _) = self.best.expect("at least one generation");
        let best_evaluation = archive
            .get(&key)
            .expect("best is archived")
            .evaluation
            .clone();
        SearchResult {
            best,
            best_evaluation,
            history: self.history,
            evaluations: archive.evaluations(),
            archive_hits: archive.hits(),
            submitted: archive.submitted(),
            archive,
        }
    }
}

fn initial_population(cfg: &GpConfig, rng: &mut seed::Rng) -> Vec<LossExpr> {
    ramped_half_and_half(
        rng,
        cfg.population_size,
        cfg.init_min_depth,
        cfg.init_max_depth,
    )
    .iter()
    .map(|e| enforce_arguments_constraint_capped(e, rng, cfg.depth_cap))
    .collect()
}

/// Full GP loop: elites, tournament parents, crossover, mutation, repair.
pub fn evolve<E: Evaluator + ?Sized>(
    cfg: &GpConfig,
    evaluator: &E,
    run_seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<SearchResult> {
    cfg.validate()?;
    let mut rng = seed::stream(run_seed, Domain::Search, 0, 0);
    let mut archive = Archive::new();
    let mut tracker = Tracker {
        history: Vec::new(),
        best: None,
    };
    let mut population = initial_population(cfg, &mut rng);
    let (mut fitness, stats) =
        archive.evaluate_population(&population, evaluator, run_seed, 0, pool);
    tracker.record(&population, &fitness, stats);

    for generation in 1..cfg.effective_generations() {
        let mut next: Vec<LossExpr> = elite_indices(&fitness, cfg.elite_count())
            .into_iter()
            .map(|i| population[i].clone())
            .collect();
        while next.len() < cfg.population_size {
            let a = tournament_select(&fitness, cfg.tournament_size, &mut rng);
            let mut child = if rng.random::<f64>() < cfg.crossover_rate {
                let b = tournament_select(&fitness, cfg.tournament_size, &mut rng);
                one_point_crossover(
                    &population[a],
                    &population[b],
                    &mut rng,
                    cfg.depth_cap,
                    cfg.max_retries,
                )
            } else {
                population[a].clone()
            };
            if rng.random::<f64>() < cfg.mutation_rate {
                child = uniform_mutation(
                    &child,
                    &mut rng,
                    cfg.mutation_depth,
                    cfg.depth_cap,
                    cfg.max_retries,
                );
            }
            next.push(enforce_arguments_constraint_capped(
                &child,
                &mut rng,
                cfg.depth_cap,
            ));
        }
        population = next;
        let (f, stats) =
            archive.evaluate_population(&population, evaluator, run_seed, generation as u64, pool);
        fitness = f;
        tracker.record(&population, &fitness, stats);
    }
    Ok(tracker.finish(archive))
}

/// Random search with the same number of submitted candidates as [`evolve`]:
/// each generation is a fresh repaired ramped half-and-half population.
pub fn random_search<E: Evaluator + ?Sized>(
    cfg: &GpConfig,
    evaluator: &E,
    run_seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<SearchResult> {
    cfg.validate()?;
    let mut rng = seed::stream(run_seed, Domain::Search, 1, 0);
    let mut archive = Archive::new();
    let mut tracker = Tracker {
        history: Vec::new(),
        best: None,
    };
    for generation in 0..cfg.effective_generations() {
        let population = initial_population(cfg, &mut rng);
        let (fitness, stats) =
            archive.evaluate_population(&population, evaluator, run_seed, generation as u64, pool);
        tracker.record(&population, &fitness, stats);
    }
    Ok(tracker.finish(archive))
}
