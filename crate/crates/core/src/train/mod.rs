//! Single-path supernet training and from-scratch retraining.

mod checkpoint;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NamedTensor, RngState, FORMAT_VERSION, MAGIC};

use crate::cost::CostModel;
use crate::data::{augment, Dataset};
use crate::engine::{BnMode, Graph, OptState, SgdConfig, Tape, Tensor};
use crate::error::{bail, Result};
use crate::sampler::{Sampler, SamplerConfig};
use crate::space::{Architecture, RunningStats, Subnet, Supernet, SupernetSpec};

fn default_batch() -> usize {
    64
}

fn default_lr() -> f32 {
    0.1
}

fn default_momentum() -> f32 {
    0.9
}

fn default_wd() -> f32 {
    4e-5
}

fn default_crop() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_log_interval() -> usize {
    100
}

/// Step-loop settings. Exactly one of `iterations` and `epochs` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    /// Zero disables periodic checkpoints (a final one is still written when
    /// a checkpoint directory is given).
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Random-crop padding; zero disables cropping.
    #[serde(default = "default_crop")]
    pub crop_padding: usize,
    #[serde(default = "default_true")]
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: Some(5000),
            epochs: None,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            checkpoint_interval: 0,
            log_interval: default_log_interval(),
            crop_padding: default_crop(),
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.iterations, self.epochs) {
            (Some(0), _) | (_, Some(0)) => bail!(InvalidConfig, "training length must be positive"),
            (Some(_), Some(_)) => bail!(InvalidConfig, "set either iterations or epochs, not both"),
            (None, None) => bail!(InvalidConfig, "set iterations or epochs"),
            _ => {}
        }
        if self.batch_size < 2 {
            bail!(InvalidConfig, "batch_size must be at least 2 for batch norm, got {}", self.batch_size);
        }
        if self.log_interval == 0 {
            bail!(InvalidConfig, "log_interval must be positive");
        }
        self.sgd().validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn batches_per_epoch(&self, examples: usize) -> usize {
        examples / self.batch_size
    }

    pub fn total_iterations(&self, examples: usize) -> usize {
        match (self.iterations, self.epochs) {
            (Some(i), _) => i,
            (None, Some(e)) => e * self.batches_per_epoch(examples),
            (None, None) => 0,
        }
    }

    /// Linear decay from the base rate to zero over the run.
    pub fn learning_rate_at(&self, iteration: usize, total: usize) -> f32 {
        self.learning_rate * (1.0 - iteration as f32 / total.max(1) as f32)
    }
}

/// Seeded, resumable batch order: one permutation per epoch derived from
/// `(seed, epoch)`; the trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    seed: u64,
    examples: usize,
    batch: usize,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(seed: u64, examples: usize, batch: usize) -> Result<Self> {
        if examples < batch {
            bail!(InvalidConfig, "dataset of {examples} examples is smaller than one batch of {batch}");
        }
        Ok(Self {
            seed,
            examples,
            batch,
            epoch: None,
        })
    }

    /// Example indices of batch number `iteration`.
    pub fn batch(&mut self, iteration: usize) -> &[usize] {
        let per_epoch = self.examples / self.batch;
        let (e, j) = (iteration / per_epoch, iteration % per_epoch);
        if self.epoch.as_ref().is_none_or(|(cur, _)| *cur != e) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(e as u64 + 1);
            let mut perm: Vec<usize> = (0..self.examples).collect();
            perm.shuffle(&mut rng);
            self.epoch = Some((e, perm));
        }
        let perm = &self.epoch.as_ref().expect("filled above").1;
        &perm[j * self.batch..(j + 1) * self.batch]
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss: f32,
    pub learning_rate: f32,
    pub arch: Architecture,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// CSV with header `iteration,loss,learning_rate,arch`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,learning_rate,arch\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.loss, r.learning_rate, r.arch));
        }
        s
    }

    /// Mean loss over a window of steps at the start and at the end.
    pub fn smoothed(&self, window: usize) -> Option<(f32, f32)> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f32>() / s.len() as f32;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }
}

/// One forward/backward/update on `arch`'s path. Returns the batch loss.
pub fn train_step(
    net: &mut Supernet,
    arch: &Architecture,
    x: Tensor,
    labels: &[usize],
    opt: &mut OptState,
    lr: f32,
) -> Result<f32> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let logits = net.forward(&mut tape, arch, input, BnMode::train())?;
    let loss = tape.softmax_cross_entropy(&logits, labels)?;
    let value = tape.value(&loss).data()[0];
    tape.backward(&loss, &mut net.store.params)?;
    opt.step(&mut net.store.params, lr)?;
    Ok(value)
}

/// Samples a path from the prior, then trains only that path on the batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step_single_path(
    net: &mut Supernet,
    x: Tensor,
    labels: &[usize],
    sampler: &Sampler,
    model: &CostModel,
    opt: &mut OptState,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, Architecture)> {
    let arch = sampler.sample(model, rng)?;
    let loss = train_step(net, &arch, x, labels, opt, lr)?;
    Ok((loss, arch))
}

/// Where the path of each step comes from.
pub enum PathSource<'a> {
    Prior { sampler: &'a Sampler, model: &'a CostModel },
    Fixed(&'a Architecture),
}

/// Mutable training state that a checkpoint captures.
pub struct TrainState {
    pub opt: OptState,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(net: &Supernet, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            opt: OptState::new(cfg.sgd(), &net.store.params)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
        })
    }

    pub fn checkpoint(&self, net: &Supernet) -> Checkpoint {
        Checkpoint::capture(net, Some(&self.opt), self.iteration as u64, &self.rng)
    }

    pub fn resume(net: &mut Supernet, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut opt = OptState::new(cfg.sgd(), &net.store.params)?;
        ck.restore(net, Some(&mut opt))?;
        Ok(Self {
            opt,
            rng: ck.rng.restore(),
            iteration: ck.iteration as usize,
        })
    }
}

/// Checkpoint output for a training run.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    pub fn path(dir: &std::path::Path, iteration: usize) -> PathBuf {
        dir.join(format!("checkpoint-{iteration:08}.spos"))
    }

    pub fn latest(dir: &std::path::Path) -> PathBuf {
        dir.join("checkpoint.spos")
    }
}

/// Runs the step loop from `state.iteration` to the configured total.
/// Deterministic for a fixed seed: batch order depends only on
/// `(seed, epoch)` and all other randomness comes from `state.rng`.
pub fn run_training(
    net: &mut Supernet,
    train: &Dataset,
    cfg: &TrainConfig,
    source: PathSource<'_>,
    state: &mut TrainState,
    seed: u64,
    sink: &CheckpointSink,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dataset(net.spec(), train)?;
    let total = cfg.total_iterations(train.len());
    let mut order = BatchOrder::new(seed, train.len(), cfg.batch_size)?;
    let mut log = TrainLog::default();
    if let Some(dir) = &sink.dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    let mut window = 0.0f32;
    while state.iteration < total {
        let t = state.iteration;
        let lr = cfg.learning_rate_at(t, total);
        let (mut x, labels) = train.batch(order.batch(t));
        let arch = match &source {
            PathSource::Prior { sampler, model } => sampler.sample(model, &mut state.rng)?,
            PathSource::Fixed(a) => (*a).clone(),
        };
        if cfg.crop_padding > 0 || cfg.flip {
            augment(&mut x, cfg.crop_padding, cfg.flip, &mut state.rng);
        }
        let loss = train_step(net, &arch, x, &labels, &mut state.opt, lr)?;
        if !loss.is_finite() {
            bail!(InvalidConfig, "training diverged at iteration {t} (loss {loss})");
        }
        window += loss;
        log.steps.push(StepRecord {
            iteration: t,
            loss,
            learning_rate: lr,
            arch,
        });
        state.iteration += 1;
        if state.iteration.is_multiple_of(cfg.log_interval) {
            log::info!(
                "iteration {}/{total} loss {:.4} lr {lr:.5}",
                state.iteration,
                window / cfg.log_interval as f32
            );
            window = 0.0;
        }
        if let Some(dir) = &sink.dir {
            if cfg.checkpoint_interval > 0 && state.iteration.is_multiple_of(cfg.checkpoint_interval) {
                let ck = state.checkpoint(net);
                ck.save(&CheckpointSink::path(dir, state.iteration))?;
                ck.save(&CheckpointSink::latest(dir))?;
            }
        }
    }
    if let Some(dir) = &sink.dir {
        state.checkpoint(net).save(&CheckpointSink::latest(dir))?;
    }
    Ok(log)
}

fn check_dataset(spec: &SupernetSpec, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        bail!(InvalidConfig, "training set is empty");
    }
    if ds.channels != spec.input_channels || ds.size != spec.input_size {
        bail!(
            InvalidConfig,
            "dataset images are {}×{}×{}, network expects {}×{}×{}",
            ds.channels,
            ds.size,
            ds.size,
            spec.input_channels,
            spec.input_size,
            spec.input_size
        );
    }
    if ds.num_classes != spec.num_classes {
        bail!(
            InvalidConfig,
            "dataset has {} classes, network has {}",
            ds.num_classes,
            spec.num_classes
        );
    }
    Ok(())
}

/// Trains the supernet from scratch with paths drawn from the prior.
pub fn train_supernet(
    net: &mut Supernet,
    train: &Dataset,
    cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    seed: u64,
    sink: &CheckpointSink,
) -> Result<TrainLog> {
    let mut state = TrainState::new(net, cfg, seed)?;
    resume_supernet(net, train, cfg, sampler_cfg, seed, &mut state, sink)
}

/// Continues supernet training from `state` (fresh or restored).
pub fn resume_supernet(
    net: &mut Supernet,
    train: &Dataset,
    cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    seed: u64,
    state: &mut TrainState,
    sink: &CheckpointSink,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dataset(net.spec(), train)?;
    let model = CostModel::new(net.spec())?;
    // Prior resolution draws from a dedicated stream.
    let mut prior_rng = ChaCha8Rng::seed_from_u64(seed);
    prior_rng.set_stream(u64::MAX);
    let sampler = Sampler::new(sampler_cfg, &model, &mut prior_rng)?;
    log::info!(
        "training supernet: {} iterations, batch {}, sampler {:?}",
        cfg.total_iterations(train.len()),
        cfg.batch_size,
        sampler_cfg.strategy
    );
    run_training(
        net,
        train,
        cfg,
        PathSource::Prior {
            sampler: &sampler,
            model: &model,
        },
        state,
        seed,
        sink,
    )
}

/// Eval-mode top-1 accuracy of `arch` with the given BN statistics.
pub fn accuracy(net: &Supernet, arch: &Architecture, stats: &RunningStats, ds: &Dataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        bail!(InvalidConfig, "evaluation set is empty");
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut stats = stats.clone();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let mut g = crate::engine::Eager::new();
        let xv = g.input(x);
        let y = net.forward_with_stats(&mut g, &mut stats, arch, xv, BnMode::Eval)?;
        correct += argmax_rows(&y).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b }))
        .collect()
}

/// Result of training an architecture from scratch.
pub struct Retrained {
    pub network: Subnet,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub log: TrainLog,
}

/// Instantiates a freshly initialized standalone network for `arch` and
/// trains it to completion.
pub fn retrain_architecture(
    arch: &Architecture,
    spec: &SupernetSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Retrained> {
    let mut network = Supernet::fresh_subnet(spec, arch, seed)?;
    let fixed = network.arch().clone();
    let mut state = TrainState::new(network.network(), cfg, seed)?;
    let log = run_training(
        network.network_mut(),
        train,
        cfg,
        PathSource::Fixed(&fixed),
        &mut state,
        seed,
        &CheckpointSink::default(),
    )?;
    let net = network.network();
    let train_accuracy = accuracy(net, &fixed, &net.store.stats, train, 256)?;
    let val_accuracy = accuracy(net, &fixed, &net.store.stats, val, 256)?;
    Ok(Retrained {
        network,
        train_accuracy,
        val_accuracy,
        log,
    })
}
