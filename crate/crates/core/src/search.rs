//! Constrained architecture search over a trained supernet: evolutionary
//! search with a top-k archive, and a random-search baseline with the same
//! budget.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{ConstraintSpec, CostModel, Metrics};
use crate::data::Dataset;
use crate::engine::{BnMode, Eager, Graph, Tensor};
use crate::error::{bail, Error, Result};
use crate::sampler::sample_uniform;
use crate::space::{Architecture, RunningStats, Supernet};
use crate::train::accuracy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    #[default]
    Evolution,
    Random,
}

impl std::str::FromStr for SearchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evolution" => Ok(SearchStrategy::Evolution),
            "random" => Ok(SearchStrategy::Random),
            _ => bail!(InvalidConfig, "unknown search strategy {s:?} (expected evolution or random)"),
        }
    }
}

fn default_population() -> usize {
    50
}

fn default_iterations() -> usize {
    20
}

fn default_topk() -> usize {
    10
}

fn default_prob() -> f64 {
    0.1
}

fn default_tries() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default)]
    pub strategy: SearchStrategy,
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_topk")]
    pub topk: usize,
    /// Crossover children per iteration; defaults to `population / 2`.
    #[serde(default)]
    pub crossover: Option<usize>,
    /// Mutation children per iteration; defaults to the rest of the
    /// population.
    #[serde(default)]
    pub mutation: Option<usize>,
    #[serde(default = "default_prob")]
    pub mutation_prob: f64,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    /// Draws allowed per child before giving up.
    #[serde(default = "default_tries")]
    pub max_tries: usize,
    /// Overrides the run seed for the search only.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            strategy: SearchStrategy::Evolution,
            population: default_population(),
            iterations: default_iterations(),
            topk: default_topk(),
            crossover: None,
            mutation: None,
            mutation_prob: default_prob(),
            constraints: Vec::new(),
            max_tries: default_tries(),
            seed: None,
        }
    }
}

impl SearchConfig {
    /// `(crossover, mutation)` children per iteration.
    pub fn offspring(&self) -> (usize, usize) {
        let n = self.crossover.unwrap_or(self.population / 2);
        let m = self.mutation.unwrap_or(self.population.saturating_sub(n));
        (n, m)
    }

    pub fn budget(&self) -> usize {
        self.population * self.iterations
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.iterations == 0 {
            bail!(InvalidConfig, "population and iterations must be positive");
        }
        if self.topk == 0 || self.topk > self.population {
            bail!(InvalidConfig, "topk must lie in [1, population], got {}", self.topk);
        }
        let (n, m) = self.offspring();
        if n + m != self.population {
            bail!(
                InvalidConfig,
                "crossover {n} + mutation {m} must equal the population {}",
                self.population
            );
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            bail!(InvalidConfig, "mutation_prob must lie in [0, 1], got {}", self.mutation_prob);
        }
        if self.max_tries == 0 {
            bail!(InvalidConfig, "max_tries must be positive");
        }
        for c in &self.constraints {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Init,
    Crossover,
    Mutation,
    Random,
}

/// An evaluated architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub arch: Architecture,
    pub fitness: f64,
    pub metrics: Metrics,
    pub provenance: Provenance,
    /// Iteration of first discovery.
    pub iteration: usize,
    /// Position of first discovery in the evaluation log.
    #[serde(skip)]
    pub order: usize,
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub arch: Architecture,
    pub fitness: f64,
    pub metrics: Metrics,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Best fitness evaluated so far.
    pub best: f64,
    /// Mean fitness of this iteration's population.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub archive: Vec<Candidate>,
    pub log: Vec<LogRecord>,
    pub curve: Vec<CurvePoint>,
}

impl SearchOutcome {
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("iteration,best,mean\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.iteration, p.best, p.mean));
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        write_file(path, self.log_jsonl()?.as_bytes())
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_file(path, self.curve_csv().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Scores architectures; larger is better.
pub trait Fitness {
    fn fitness(&mut self, arch: &Architecture) -> Result<f64>;
}

impl<F: FnMut(&Architecture) -> f64> Fitness for F {
    fn fitness(&mut self, arch: &Architecture) -> Result<f64> {
        Ok(self(arch))
    }
}

/// Validation accuracy with inherited weights after recalibrating batch
/// norm on a calibration set.
pub struct SupernetFitness<'a> {
    net: &'a Supernet,
    calib: Tensor,
    val: &'a Dataset,
    batch: usize,
}

impl<'a> SupernetFitness<'a> {
    pub fn new(net: &'a Supernet, calib: &Dataset, val: &'a Dataset) -> Result<Self> {
        if calib.is_empty() {
            bail!(InvalidConfig, "calibration set is empty");
        }
        if val.is_empty() {
            bail!(InvalidConfig, "validation set is empty");
        }
        let idx: Vec<usize> = (0..calib.len()).collect();
        Ok(Self {
            net,
            calib: calib.batch(&idx).0,
            val,
            batch: 256,
        })
    }
}

impl Fitness for SupernetFitness<'_> {
    fn fitness(&mut self, arch: &Architecture) -> Result<f64> {
        let stats = recalibrate_bn_batch(self.net, arch, &self.calib)?;
        evaluate_candidate(self.net, arch, self.val, &stats, self.batch)
    }
}

/// Exact batch-norm statistics of `arch` over `calib`, in a private copy of
/// the supernet's statistics. The whole set runs as one batch so every layer
/// sees inputs normalized by already-exact statistics.
pub fn recalibrate_bn(net: &Supernet, arch: &Architecture, calib: &Dataset) -> Result<RunningStats> {
    if calib.is_empty() {
        bail!(InvalidConfig, "calibration set is empty");
    }
    let idx: Vec<usize> = (0..calib.len()).collect();
    recalibrate_bn_batch(net, arch, &calib.batch(&idx).0)
}

pub fn recalibrate_bn_batch(net: &Supernet, arch: &Architecture, x: &Tensor) -> Result<RunningStats> {
    if x.shape().first().is_none_or(|&n| n == 0) {
        bail!(InvalidConfig, "calibration set is empty");
    }
    let mut stats = net.store.stats.clone();
    let mut g = Eager::new();
    let xv = g.input(x.clone());
    net.forward_with_stats(&mut g, &mut stats, arch, xv, BnMode::Calibrate)?;
    Ok(stats)
}

/// Top-1 validation accuracy with inherited weights; inference only.
pub fn evaluate_candidate(
    net: &Supernet,
    arch: &Architecture,
    val: &Dataset,
    stats: &RunningStats,
    batch: usize,
) -> Result<f64> {
    accuracy(net, arch, stats, val, batch)
}

fn satisfies(model: &CostModel, arch: &Architecture, constraints: &[ConstraintSpec]) -> Result<bool> {
    model.satisfies(arch, constraints)
}

/// `count` distinct uniformly sampled architectures satisfying every
/// constraint, with at most `10·count` draws.
pub fn init_population<R: Rng + ?Sized>(
    model: &CostModel,
    constraints: &[ConstraintSpec],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Architecture>> {
    if count == 0 {
        bail!(InvalidConfig, "population must be positive");
    }
    model.check_constraints(constraints)?;
    let mut out: Vec<Architecture> = Vec::with_capacity(count);
    let mut feasible = 0usize;
    for _ in 0..10 * count {
        let a = sample_uniform(model.space(), rng);
        if !satisfies(model, &a, constraints)? {
            continue;
        }
        feasible += 1;
        if !out.contains(&a) {
            out.push(a);
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    let list = constraints.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
    if feasible == 0 {
        bail!(
            InfeasibleConstraint,
            "no architecture satisfying [{list}] in {} uniform draws",
            10 * count
        );
    }
    bail!(
        InfeasibleConstraint,
        "only {} distinct architectures satisfying [{list}] found in {} draws, need {count}",
        out.len(),
        10 * count
    )
}

/// Child taking each gene from one of two parents by a fair coin.
pub fn crossover_child<R: Rng + ?Sized>(parents: &[Architecture], rng: &mut R) -> Architecture {
    let a = rng.random_range(0..parents.len());
    let b = if parents.len() > 1 {
        let j = rng.random_range(0..parents.len() - 1);
        if j >= a { j + 1 } else { j }
    } else {
        a
    };
    let genes = parents[a]
        .genes()
        .iter()
        .zip(parents[b].genes())
        .map(|(x, y)| if rng.random_bool(0.5) { *x } else { *y })
        .collect();
    Architecture::new(genes)
}

/// Copy of a random parent with every gene resampled uniformly (current value
/// included) with probability `prob`.
pub fn mutate_child<R: Rng + ?Sized>(model: &CostModel, parents: &[Architecture], prob: f64, rng: &mut R) -> Architecture {
    let mut child = parents.choose(rng).expect("nonempty parents").clone();
    let space = model.space();
    for (b, g) in child.genes_mut().iter_mut().enumerate() {
        if rng.random_bool(prob) {
            *g = space.gene_at(b, rng.random_range(0..space.block_choices(b)));
        }
    }
    child
}

fn constrained<R: Rng + ?Sized>(
    model: &CostModel,
    constraints: &[ConstraintSpec],
    tries: usize,
    what: &str,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Architecture,
) -> Result<Architecture> {
    for _ in 0..tries {
        let a = draw(rng);
        if satisfies(model, &a, constraints)? {
            return Ok(a);
        }
    }
    bail!(DegenerateArchive, "no {what} child satisfied the constraints in {tries} draws")
}

/// `n` crossover children of archive members, each redrawn until it meets
/// the constraints (at most `max_tries` draws per child).
pub fn crossover<R: Rng + ?Sized>(
    model: &CostModel,
    archive: &[Architecture],
    n: usize,
    constraints: &[ConstraintSpec],
    max_tries: usize,
    rng: &mut R,
) -> Result<Vec<Architecture>> {
    if archive.is_empty() {
        bail!(DegenerateArchive, "crossover needs a nonempty archive");
    }
    (0..n)
        .map(|_| constrained(model, constraints, max_tries, "crossover", rng, |r| crossover_child(archive, r)))
        .collect()
}

/// `m` mutated copies of archive members, constraint-filtered like
/// [`crossover`].
pub fn mutate<R: Rng + ?Sized>(
    model: &CostModel,
    archive: &[Architecture],
    m: usize,
    prob: f64,
    constraints: &[ConstraintSpec],
    max_tries: usize,
    rng: &mut R,
) -> Result<Vec<Architecture>> {
    if archive.is_empty() {
        bail!(DegenerateArchive, "mutation needs a nonempty archive");
    }
    if !(0.0..=1.0).contains(&prob) {
        bail!(InvalidConfig, "mutation probability {prob} outside [0, 1]");
    }
    (0..m)
        .map(|_| constrained(model, constraints, max_tries, "mutation", rng, |r| mutate_child(model, archive, prob, r)))
        .collect()
}

/// The `k` best distinct candidates of `archive ∪ population`, by fitness
/// and then by earlier discovery.
pub fn update_topk(archive: &[Candidate], population: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = Vec::with_capacity(archive.len() + population.len());
    for c in archive.iter().chain(population) {
        match all.iter_mut().find(|x| x.arch == c.arch) {
            Some(x) if c.order < x.order => *x = c.clone(),
            Some(_) => {}
            None => all.push(c.clone()),
        }
    }
    all.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.order.cmp(&b.order)));
    all.truncate(k);
    all
}

/// Builds a population of distinct children. Each child prefers an
/// architecture not evaluated before; when none turns up within the draw cap
/// a previously seen one is reused.
struct Breeder<'a> {
    model: &'a CostModel,
    constraints: &'a [ConstraintSpec],
    max_tries: usize,
}

impl Breeder<'_> {
    fn child<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        taken: &[(Architecture, Provenance)],
        seen: &HashMap<Architecture, Candidate>,
        mut draw: impl FnMut(&mut R) -> Architecture,
    ) -> Result<Option<Architecture>> {
        let mut fallback = None;
        for _ in 0..self.max_tries {
            let a = draw(rng);
            if taken.iter().any(|(t, _)| *t == a) || !satisfies(self.model, &a, self.constraints)? {
                continue;
            }
            if !seen.contains_key(&a) {
                return Ok(Some(a));
            }
            fallback.get_or_insert(a);
        }
        Ok(fallback)
    }
}

struct Run<'a, F: Fitness + ?Sized> {
    model: &'a CostModel,
    fitness: &'a mut F,
    seen: HashMap<Architecture, Candidate>,
    log: Vec<LogRecord>,
}

impl<F: Fitness + ?Sized> Run<'_, F> {
    fn evaluate(&mut self, pop: &[(Architecture, Provenance)], iteration: usize) -> Result<Vec<Candidate>> {
        let mut out = Vec::with_capacity(pop.len());
        for (arch, prov) in pop {
            let c = match self.seen.get(arch) {
                Some(c) => c.clone(),
                None => {
                    let fitness = self.fitness.fitness(arch)?;
                    if fitness.is_nan() {
                        bail!(InvalidConfig, "fitness of {arch} is NaN");
                    }
                    let c = Candidate {
                        arch: arch.clone(),
                        fitness,
                        metrics: self.model.metrics(arch)?,
                        provenance: *prov,
                        iteration,
                        order: self.log.len(),
                    };
                    self.seen.insert(arch.clone(), c.clone());
                    c
                }
            };
            self.log.push(LogRecord {
                iteration,
                arch: arch.clone(),
                fitness: c.fitness,
                metrics: c.metrics,
                provenance: *prov,
            });
            out.push(c);
        }
        Ok(out)
    }
}

fn curve_point(iteration: usize, archive: &[Candidate], pop: &[Candidate]) -> CurvePoint {
    CurvePoint {
        iteration,
        best: archive.first().map_or(f64::NAN, |c| c.fitness),
        mean: pop.iter().map(|c| c.fitness).sum::<f64>() / pop.len() as f64,
    }
}

/// Runs the configured strategy for `population · iterations` evaluations.
/// Every evaluated architecture satisfies every constraint.
pub fn search<F: Fitness + ?Sized>(model: &CostModel, fitness: &mut F, cfg: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    cfg.validate()?;
    model.check_constraints(&cfg.constraints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(seed));
    rng.set_stream(0x5ea7c4);
    let first = init_population(model, &cfg.constraints, cfg.population, &mut rng)?;
    let init_prov = match cfg.strategy {
        SearchStrategy::Evolution => Provenance::Init,
        SearchStrategy::Random => Provenance::Random,
    };
    let mut pop: Vec<(Architecture, Provenance)> = first.into_iter().map(|a| (a, init_prov)).collect();
    let breeder = Breeder {
        model,
        constraints: &cfg.constraints,
        max_tries: cfg.max_tries,
    };
    let mut run = Run {
        model,
        fitness,
        seen: HashMap::new(),
        log: Vec::with_capacity(cfg.budget()),
    };
    let mut archive: Vec<Candidate> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let (n, m) = cfg.offspring();
    for it in 0..cfg.iterations {
        let evaluated = run.evaluate(&pop, it)?;
        archive = update_topk(&archive, &evaluated, cfg.topk);
        curve.push(curve_point(it, &archive, &evaluated));
        log::info!(
            "search iteration {it}: best {:.4}, mean {:.4}",
            curve[it].best,
            curve[it].mean
        );
        if it + 1 == cfg.iterations {
            break;
        }
        pop = Vec::with_capacity(cfg.population);
        match cfg.strategy {
            SearchStrategy::Evolution => {
                let parents: Vec<Architecture> = archive.iter().map(|c| c.arch.clone()).collect();
                let mut short = 0;
                for _ in 0..n {
                    match breeder.child(&mut rng, &pop, &run.seen, |r| crossover_child(&parents, r))? {
                        Some(a) => pop.push((a, Provenance::Crossover)),
                        None => short += 1,
                    }
                }
                for _ in 0..m + short {
                    let child = breeder.child(&mut rng, &pop, &run.seen, |r| {
                        mutate_child(model, &parents, cfg.mutation_prob, r)
                    })?;
                    match child {
                        Some(a) => pop.push((a, Provenance::Mutation)),
                        None => bail!(
                            DegenerateArchive,
                            "iteration {it}: no new constraint-satisfying child in {} draws",
                            cfg.max_tries
                        ),
                    }
                }
            }
            SearchStrategy::Random => {
                for _ in 0..cfg.population {
                    match breeder.child(&mut rng, &pop, &run.seen, |r| sample_uniform(model.space(), r))? {
                        Some(a) => pop.push((a, Provenance::Random)),
                        None => bail!(
                            InfeasibleConstraint,
                            "iteration {it}: no new constraint-satisfying sample in {} draws",
                            cfg.max_tries
                        ),
                    }
                }
            }
        }
    }
    let best = archive.first().cloned().expect("at least one evaluation");
    Ok(SearchOutcome {
        best,
        archive,
        log: run.log,
        curve,
    })
}
