//! Desk-scale train, search and retrain pipeline used to measure how well
//! inherited-weight accuracy ranks architectures.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spos::cost::CostModel;
use spos::data::{split, stratified_split, synthetic, SyntheticConfig};
use spos::sampler::{sample_uniform, SamplerConfig};
use spos::search::{recalibrate_bn, search, SearchConfig, SupernetFitness};
use spos::space::{Architecture, Gene, Supernet, SupernetSpec};
use spos::train::{accuracy, retrain_architecture, train_supernet, CheckpointSink, TrainConfig};

use super::oracles::kendall_tau;

pub struct PipelineConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub supernet_iterations: usize,
    pub retrain_iterations: usize,
    pub population: usize,
    pub generations: usize,
    pub calib_samples: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Full desk configuration; `SPOS_C9_SCALE` (default 1) scales every
    /// iteration count for quick runs.
    pub fn from_env() -> Self {
        let scale: f64 = std::env::var("SPOS_C9_SCALE").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
        let it = |n: usize| ((n as f64 * scale).round() as usize).max(2);
        Self {
            samples: 22_000,
            test_samples: 2_000,
            supernet_iterations: it(8_000),
            retrain_iterations: it(1_000),
            population: 20,
            generations: 5,
            calib_samples: 1_000,
            seed: 1,
        }
    }
}

pub struct ArchResult {
    pub label: String,
    pub arch: Architecture,
    pub macs: u64,
    pub inherited: f64,
    pub retrained: f64,
}

pub struct PipelineReport {
    pub spread: Vec<ArchResult>,
    pub winner: ArchResult,
    pub tau: f64,
    pub best_baseline: f64,
    pub supernet_seconds: f64,
    pub total_seconds: f64,
}

fn spread_archs(model: &CostModel, blocks: usize, seed: u64) -> Vec<(String, Architecture)> {
    let mut out: Vec<(String, Architecture)> = (0..4u8)
        .map(|v| (format!("all-choice_{}", ["3", "5", "7", "x"][v as usize]), Architecture::uniform(blocks, Gene::variant(v))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bead);
    let mut pool: Vec<(u64, Architecture)> = (0..2000)
        .map(|_| sample_uniform(model.space(), &mut rng))
        .filter(|a| out.iter().all(|(_, b)| b != a))
        .map(|a| (model.macs(&a).expect("valid arch"), a))
        .collect();
    pool.sort_by_key(|(m, a)| (*m, a.encode()));
    for q in [0.1, 0.37, 0.63, 0.9] {
        let (_, a) = pool[((pool.len() - 1) as f64 * q) as usize].clone();
        out.push((format!("random@q{q}"), a));
    }
    out
}

pub fn run(cfg: &PipelineConfig) -> spos::Result<PipelineReport> {
    let start = Instant::now();
    let spec = SupernetSpec::desk();
    let model = CostModel::new(&spec)?;
    let full = synthetic(
        &SyntheticConfig {
            samples: cfg.samples,
            ..SyntheticConfig::default()
        },
        cfg.seed,
    )?;
    let frac = cfg.test_samples as f64 / cfg.samples as f64;
    let (rest, test_idx) = stratified_split(&full.labels, full.num_classes, frac, cfg.seed ^ 0x7e57);
    let test = full.subset(&test_idx);
    let splits = split(full.subset(&rest), None, 0.1, cfg.calib_samples, cfg.seed)?;

    let mut net = Supernet::build(&spec, cfg.seed)?;
    let train_cfg = TrainConfig {
        iterations: Some(cfg.supernet_iterations),
        log_interval: 500,
        ..TrainConfig::default()
    };
    train_supernet(&mut net, &splits.train, &train_cfg, &SamplerConfig::default(), cfg.seed, &CheckpointSink::default())?;
    let supernet_seconds = start.elapsed().as_secs_f64();
    println!("  supernet trained in {supernet_seconds:.0}s");

    let search_cfg = SearchConfig {
        population: cfg.population,
        iterations: cfg.generations,
        topk: cfg.population / 2,
        ..SearchConfig::default()
    };
    let mut fitness = SupernetFitness::new(&net, &splits.calib, &splits.val)?;
    let outcome = search(&model, &mut fitness, &search_cfg, cfg.seed)?;
    println!(
        "  search of {} evaluations done at {:.0}s, best {} fitness {:.4}",
        search_cfg.budget(),
        start.elapsed().as_secs_f64(),
        outcome.best.arch,
        outcome.best.fitness
    );

    let retrain_cfg = TrainConfig {
        iterations: Some(cfg.retrain_iterations),
        log_interval: 500,
        ..TrainConfig::default()
    };
    let evaluate = |label: String, arch: Architecture| -> spos::Result<ArchResult> {
        let stats = recalibrate_bn(&net, &arch, &splits.calib)?;
        let inherited = accuracy(&net, &arch, &stats, &splits.val, 256)?;
        let r = retrain_architecture(&arch, &spec, &splits.train, &splits.val, &retrain_cfg, cfg.seed)?;
        let sub = r.network.network();
        let retrained = accuracy(sub, r.network.arch(), &sub.store.stats, &test, 256)?;
        println!(
            "  {label}: inherited {inherited:.4}, retrained {retrained:.4} at {:.0}s",
            start.elapsed().as_secs_f64()
        );
        Ok(ArchResult {
            label,
            macs: model.macs(&arch)?,
            arch,
            inherited,
            retrained,
        })
    };

    let mut spread = Vec::new();
    for (label, arch) in spread_archs(&model, spec.num_blocks(), cfg.seed) {
        spread.push(evaluate(label, arch)?);
    }
    let best = outcome.best.arch.clone();
    let winner = match spread.iter().find(|r| r.arch == best) {
        Some(r) => ArchResult {
            label: format!("winner (= {})", r.label),
            arch: r.arch.clone(),
            macs: r.macs,
            inherited: r.inherited,
            retrained: r.retrained,
        },
        None => evaluate("winner".into(), best)?,
    };
    let inherited: Vec<f64> = spread.iter().map(|r| r.inherited).collect();
    let retrained: Vec<f64> = spread.iter().map(|r| r.retrained).collect();
    let tau = kendall_tau(&inherited, &retrained);
    let best_baseline = spread[..4].iter().map(|r| r.retrained).fold(f64::MIN, f64::max);
    Ok(PipelineReport {
        spread,
        winner,
        tau,
        best_baseline,
        supernet_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}
