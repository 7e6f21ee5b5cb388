//! Command-line front end: `train-supernet`, `search`, `retrain`, `eval`,
//! `cost` and `make-latency-table`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::RunConfig;
use crate::cost::{ConstraintSpec, CostModel, LatencyTable, Metrics};
use crate::data::{load_dataset, Splits};
use crate::engine::{BnMode, Eager, Graph, Tensor};
use crate::error::{bail, Error, Result};
use crate::search::{search, write_file, SearchStrategy, SupernetFitness};
use crate::space::{Architecture, Supernet, SupernetSpec};
use crate::train::{
    accuracy, resume_supernet, retrain_architecture, train_supernet, Checkpoint, CheckpointSink, TrainState,
};

#[derive(Debug, Parser)]
#[command(name = "spos", version, about = "Single-path one-shot architecture search")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the weight-sharing supernet with uniformly sampled paths.
    TrainSupernet {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search a trained supernet under hard constraints.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// METRIC:MAX or METRIC:MIN..MAX; repeatable, all must hold.
        #[arg(long = "constraint")]
        constraints: Vec<ConstraintSpec>,
        #[arg(long)]
        strategy: Option<SearchStrategy>,
    },
    /// Train one architecture from scratch.
    Retrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        arch: Architecture,
    },
    /// Validation accuracy of an architecture with inherited weights.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arch: Architecture,
    },
    /// Per-unit cost report of an architecture.
    Cost {
        #[command(flatten)]
        space: SpaceArgs,
        #[arg(long)]
        arch: Architecture,
        #[arg(long = "constraint")]
        constraints: Vec<ConstraintSpec>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Time every block choice and write a latency table.
    MakeLatencyTable {
        #[command(flatten)]
        space: SpaceArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpaceArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// One of the built-in supernet presets.
    #[arg(long)]
    pub preset: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SpaceArgs {
    fn model(&self) -> Result<(SupernetSpec, CostModel)> {
        match (&self.config, &self.preset) {
            (Some(p), _) => {
                let cfg = RunConfig::load(p)?;
                Ok((cfg.supernet_spec()?, cfg.cost_model()?))
            }
            (None, preset) => {
                let spec = SupernetSpec::preset(preset.as_deref().unwrap_or("desk"))?;
                let model = CostModel::new(&spec)?;
                Ok((spec, model))
            }
        }
    }
}

/// Deterministic result of a search run.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub best_arch: Architecture,
    pub fitness: f64,
    pub metrics: Metrics,
    pub budget: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
struct RetrainReport {
    arch: Architecture,
    train_accuracy: f64,
    val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_accuracy: Option<f64>,
    metrics: Metrics,
    seed: u64,
    config_hash: String,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    arch: Architecture,
    val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_accuracy: Option<f64>,
    metrics: Metrics,
}

/// Parses `argv` (program name first) and runs it, printing errors to
/// stderr. Returns the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cmd: &Command, stdout: &mut dyn Write) -> Result<()> {
    let print = |out: &mut dyn Write, text: &str| -> Result<()> {
        out.write_all(text.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e))
    };
    match cmd {
        Command::TrainSupernet { run, checkpoint } => {
            let cfg = run.resolve()?;
            create_dir(&cfg.out)?;
            write_file(&cfg.out.join("config.json"), cfg.to_json()?.as_bytes())?;
            let splits = load_dataset(&cfg.dataset, cfg.seed)?;
            let spec = cfg.supernet_spec()?;
            let mut net = Supernet::build(&spec, cfg.seed)?;
            let sink = CheckpointSink {
                dir: Some(cfg.out.clone()),
            };
            let log = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let mut state = TrainState::resume(&mut net, &cfg.train, &ck)?;
                    resume_supernet(&mut net, &splits.train, &cfg.train, &cfg.sampler, cfg.seed, &mut state, &sink)?
                }
                None => train_supernet(&mut net, &splits.train, &cfg.train, &cfg.sampler, cfg.seed, &sink)?,
            };
            write_file(&cfg.out.join("train_loss.csv"), log.to_csv().as_bytes())?;
            print(
                stdout,
                &format!("wrote {}\n", CheckpointSink::latest(&cfg.out).display()),
            )
        }
        Command::Search {
            run,
            checkpoint,
            constraints,
            strategy,
        } => {
            let mut cfg = run.resolve()?;
            if !constraints.is_empty() {
                cfg.search.constraints = constraints.clone();
            }
            if let Some(s) = strategy {
                cfg.search.strategy = *s;
            }
            cfg.validate()?;
            let model = cfg.cost_model()?;
            model.check_constraints(&cfg.search.constraints)?;
            let net = load_supernet(&cfg, checkpoint)?;
            let splits = load_dataset(&cfg.dataset, cfg.seed)?;
            let mut fitness = SupernetFitness::new(&net, &splits.calib, &splits.val)?;
            let outcome = search(&model, &mut fitness, &cfg.search, cfg.seed)?;
            create_dir(&cfg.out)?;
            outcome.write_log(&cfg.out.join("search_log.jsonl"))?;
            outcome.write_curve(&cfg.out.join("search_curve.csv"))?;
            write_file(
                &cfg.out.join("best_arch.txt"),
                format!("{}\n", outcome.best.arch).as_bytes(),
            )?;
            let summary = Summary {
                best_arch: outcome.best.arch.clone(),
                fitness: outcome.best.fitness,
                metrics: model.metrics(&outcome.best.arch)?,
                budget: outcome.log.len(),
                seed: cfg.search.seed.unwrap_or(cfg.seed),
                config_hash: cfg.hash()?,
            };
            let text = serde_json::to_string_pretty(&summary)? + "\n";
            write_file(&cfg.out.join("summary.json"), text.as_bytes())?;
            print(stdout, &text)
        }
        Command::Retrain { run, arch } => {
            let cfg = run.resolve()?;
            let spec = cfg.supernet_spec()?;
            let model = cfg.cost_model()?;
            model.space().check(arch)?;
            let splits = load_dataset(&cfg.dataset, cfg.seed)?;
            let r = retrain_architecture(arch, &spec, &splits.train, &splits.val, &cfg.retrain, cfg.seed)?;
            let net = r.network.network();
            let test_accuracy = match &splits.test {
                Some(t) => Some(accuracy(net, r.network.arch(), &net.store.stats, t, 256)?),
                None => None,
            };
            create_dir(&cfg.out)?;
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Checkpoint::capture(net, None, r.log.steps.len() as u64, &rng).save(&cfg.out.join("model.spos"))?;
            write_file(&cfg.out.join("retrain_loss.csv"), r.log.to_csv().as_bytes())?;
            let report = RetrainReport {
                arch: arch.clone(),
                train_accuracy: r.train_accuracy,
                val_accuracy: r.val_accuracy,
                test_accuracy,
                metrics: model.metrics(arch)?,
                seed: cfg.seed,
                config_hash: cfg.hash()?,
            };
            let text = serde_json::to_string_pretty(&report)? + "\n";
            write_file(&cfg.out.join("retrain.json"), text.as_bytes())?;
            print(stdout, &text)
        }
        Command::Eval { run, checkpoint, arch } => {
            let cfg = run.resolve()?;
            let model = cfg.cost_model()?;
            let net = load_supernet(&cfg, checkpoint)?;
            net.check_arch(arch)?;
            let Splits { val, calib, test, .. } = load_dataset(&cfg.dataset, cfg.seed)?;
            let stats = crate::search::recalibrate_bn(&net, arch, &calib)?;
            let test_accuracy = match &test {
                Some(t) => Some(accuracy(&net, arch, &stats, t, 256)?),
                None => None,
            };
            let report = EvalReport {
                arch: arch.clone(),
                val_accuracy: accuracy(&net, arch, &stats, &val, 256)?,
                test_accuracy,
                metrics: model.metrics(arch)?,
            };
            print(stdout, &(serde_json::to_string_pretty(&report)? + "\n"))
        }
        Command::Cost {
            space,
            arch,
            constraints,
            json,
        } => {
            let (_, model) = space.model()?;
            let report = model.report(arch)?;
            let mut text = if *json {
                report.to_json()? + "\n"
            } else {
                report.to_string()
            };
            for c in constraints {
                let v = model.metric(arch, c.metric)?;
                text.push_str(&format!("{c}: {} ({v})\n", if c.holds(v) { "ok" } else { "violated" }));
            }
            print(stdout, &text)
        }
        Command::MakeLatencyTable {
            space,
            out,
            batch,
            repeats,
        } => {
            let (spec, _) = space.model()?;
            let table = measure_latency(&spec, *batch, *repeats)?;
            table.save(out)?;
            print(stdout, &format!("wrote {}\n", out.display()))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_supernet(cfg: &RunConfig, checkpoint: &Path) -> Result<Supernet> {
    if !checkpoint.exists() {
        bail!(Checkpoint, "checkpoint {} does not exist", checkpoint.display());
    }
    let ck = Checkpoint::load(checkpoint)?;
    let mut net = Supernet::build(&cfg.supernet_spec()?, cfg.seed)?;
    ck.restore(&mut net, None)?;
    Ok(net)
}

fn median_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Median eval-mode forward time per unit at the given batch size.
pub fn measure_latency(spec: &SupernetSpec, batch: usize, repeats: usize) -> Result<LatencyTable> {
    if batch == 0 || repeats == 0 {
        bail!(InvalidConfig, "batch and repeats must be positive");
    }
    let net = Supernet::build(spec, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = |shape: &[usize]| -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    };
    let mut stats = net.store.stats.clone();
    let image = noise(&[batch, spec.input_channels, spec.input_size, spec.input_size]);
    let stem = median_ms(repeats, || {
        let mut g = Eager::new();
        let x = g.input(image.clone());
        net.run_stem(&mut g, &mut stats, x, BnMode::Eval).map(drop)
    })?;
    let (c, o) = match net.num_blocks().checked_sub(1) {
        Some(i) => (spec.final_channels(), net.block_spec(i).output_size()),
        None => (spec.stem.channels, spec.stem_output_size()),
    };
    let head_in = noise(&[batch, c, o, o]);
    let head = median_ms(repeats, || {
        let mut g = Eager::new();
        let x = g.input(head_in.clone());
        net.run_head(&mut g, &mut stats, x, BnMode::Eval).map(drop)
    })?;
    let mut err = None;
    let table = LatencyTable::from_fn(net.space(), stem, head, |b, gene| {
        let bs = net.block_spec(b);
        let x = noise(&[batch, bs.in_channels, bs.input_size, bs.input_size]);
        let t = median_ms(repeats, || {
            let mut g = Eager::new();
            let xv = g.input(x.clone());
            net.run_block(&mut g, &mut stats, b, gene, xv, BnMode::Eval).map(drop)
        });
        t.unwrap_or_else(|e| {
            err.get_or_insert(e);
            f64::NAN
        })
    });
    match err {
        Some(e) => Err(e),
        None => Ok(table),
    }
}
