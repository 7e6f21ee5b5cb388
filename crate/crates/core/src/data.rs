//! Image datasets: CIFAR-10 binary batches and a seeded synthetic task whose
//! labels come from a hidden random convolutional teacher.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{ConvParams, Eager, Graph, ParamStore, Tensor};
use crate::error::{bail, Error, Result};

/// Images stored as bytes (N×C×H×W, channel-major) and normalized per channel
/// when batched.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Normalized batch of the given examples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let hw = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            for (c, plane) in self.image(i).chunks(hw).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                data.extend(plane.iter().map(|&p| (p as f32 / 255.0 - m) / s));
            }
        }
        let x = Tensor::new(vec![indices.len(), self.channels, self.size, self.size], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            ..*self
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 channel-major pixels of a 32×32 RGB image.
pub fn parse_cifar10(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "truncated record: {} bytes left, expected {CIFAR_RECORD}",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label {label} outside 0..{num_classes}"),
            });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        channels: 3,
        size: 32,
        num_classes,
        images,
        labels,
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    })
}

/// Concatenates the given CIFAR-10 binary files.
pub fn load_cifar10(files: &[PathBuf], num_classes: usize) -> Result<Dataset> {
    if files.is_empty() {
        bail!(InvalidConfig, "cifar10-binary dataset lists no files");
    }
    let mut out: Option<Dataset> = None;
    for path in files {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ds = parse_cifar10(&bytes, num_classes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        match &mut out {
            None => out = Some(ds),
            Some(acc) => {
                acc.images.extend(ds.images);
                acc.labels.extend(ds.labels);
            }
        }
    }
    Ok(out.expect("at least one file"))
}

fn default_samples() -> usize {
    10_000
}

fn default_image_size() -> usize {
    32
}

fn default_classes() -> usize {
    10
}

/// Seeded synthetic image-classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            image_size: default_image_size(),
            num_classes: default_classes(),
            seed: None,
        }
    }
}

/// Bilinear upsampling of a `g×g` grid to `s×s`.
fn upsample(grid: &[f32], g: usize, s: usize, out: &mut [f32], scale: f32) {
    for y in 0..s {
        let fy = (y as f32 + 0.5) * g as f32 / s as f32 - 0.5;
        let y0 = fy.floor().clamp(0.0, (g - 1) as f32) as usize;
        let y1 = (y0 + 1).min(g - 1);
        let ty = (fy - y0 as f32).clamp(0.0, 1.0);
        for x in 0..s {
            let fx = (x as f32 + 0.5) * g as f32 / s as f32 - 0.5;
            let x0 = fx.floor().clamp(0.0, (g - 1) as f32) as usize;
            let x1 = (x0 + 1).min(g - 1);
            let tx = (fx - x0 as f32).clamp(0.0, 1.0);
            let top = grid[y0 * g + x0] * (1.0 - tx) + grid[y0 * g + x1] * tx;
            let bot = grid[y1 * g + x0] * (1.0 - tx) + grid[y1 * g + x1] * tx;
            out[y * s + x] += scale * (top * (1.0 - ty) + bot * ty);
        }
    }
}

struct Teacher {
    store: ParamStore,
}

impl Teacher {
    fn new(rng: &mut ChaCha8Rng, classes: usize) -> Self {
        let mut store = ParamStore::new();
        let mut he = |name: &str, shape: Vec<usize>, fan_in: usize| {
            let n = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
            let len = shape.iter().product();
            let data = (0..len).map(|_| n.sample(rng)).collect();
            store.add(name, Tensor::new(shape, data).expect("teacher shape"));
        };
        he("conv1", vec![16, 3, 5, 5], 75);
        he("conv2", vec![32, 16, 3, 3], 144);
        he("conv3", vec![48, 32, 3, 3], 288);
        he("fc", vec![classes, 48], 48);
        Self { store }
    }

    fn logits(&self, x: Tensor) -> Result<Tensor> {
        let mut g = Eager::new();
        let p = |g: &mut Eager, i| {
            let id = crate::engine::ParamId(i);
            g.param(&self.store, id, self.store.full_extent(id))
        };
        let x = g.input(x);
        let w1 = p(&mut g, 0)?;
        let h = g.conv2d(&x, &w1, ConvParams::new(2, 2, 1))?;
        let h = g.relu(&h)?;
        let w2 = p(&mut g, 1)?;
        let h = g.conv2d(&h, &w2, ConvParams::new(2, 1, 1))?;
        let h = g.relu(&h)?;
        let w3 = p(&mut g, 2)?;
        let h = g.conv2d(&h, &w3, ConvParams::new(1, 1, 1))?;
        let h = g.relu(&h)?;
        let h = g.global_avg_pool(&h)?;
        let w = p(&mut g, 3)?;
        let y = g.linear(&h, &w, None)?;
        Ok((*y).clone())
    }
}

/// Per-class offsets that make `argmax(logits + bias)` roughly balanced.
fn balancing_bias(logits: &[f32], k: usize) -> Vec<f32> {
    let n = logits.len() / k;
    let mean = logits.iter().sum::<f32>() / logits.len() as f32;
    let spread = (logits.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / logits.len() as f32).sqrt();
    let mut bias = vec![0.0f32; k];
    let mut step = spread.max(1e-6);
    for _ in 0..200 {
        let mut counts = vec![0usize; k];
        for row in logits.chunks(k) {
            let best = (0..k).fold(0, |b, c| if row[c] + bias[c] > row[b] + bias[b] { c } else { b });
            counts[best] += 1;
        }
        for c in 0..k {
            bias[c] += step * (1.0 / k as f32 - counts[c] as f32 / n as f32);
        }
        step *= 0.98;
    }
    bias
}

/// Generates smooth random images and labels them with a hidden random
/// teacher network plus per-class offsets that balance the classes. Identical configs give bit-identical datasets.
pub fn synthetic(cfg: &SyntheticConfig, run_seed: u64) -> Result<Dataset> {
    let (n, s, k) = (cfg.samples, cfg.image_size, cfg.num_classes);
    if n == 0 || s < 4 || k < 2 {
        bail!(InvalidConfig, "synthetic dataset needs samples > 0, image_size >= 4, num_classes >= 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(run_seed));
    let teacher = Teacher::new(&mut rng, k);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let hw = s * s;
    let mut images = Vec::with_capacity(n * 3 * hw);
    let mut field = vec![0.0f32; hw];
    for _ in 0..n {
        for _ in 0..3 {
            field.iter_mut().for_each(|v| *v = 0.0);
            for (g, scale) in [(3usize, 1.0f32), (6, 0.6), (12, 0.35)] {
                let grid: Vec<f32> = (0..g * g).map(|_| normal.sample(&mut rng)).collect();
                upsample(&grid, g, s, &mut field, scale);
            }
            images.extend(field.iter().map(|v| {
                let noise = 0.1 * normal.sample(&mut rng);
                (128.0 + 48.0 * (v + noise)).round().clamp(0.0, 255.0) as u8
            }));
        }
    }
    let mut ds = Dataset {
        channels: 3,
        size: s,
        num_classes: k,
        images,
        labels: vec![0; n],
        mean: vec![0.5; 3],
        std: vec![0.2; 3],
    };
    let mut logits = Vec::with_capacity(n * k);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(256) {
        let (x, _) = ds.batch(chunk);
        logits.extend_from_slice(teacher.logits(x)?.data());
    }
    let bias = balancing_bias(&logits, k);
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let score = |c: usize| row[c] + bias[c];
        ds.labels[i] = (0..k).fold(0, |best, c| if score(c) > score(best) { c } else { best });
    }
    Ok(ds)
}

/// Splits indices per class so that `round(fraction·N)` examples go to the
/// second part, distributed over classes by largest remainder.
pub fn stratified_split(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let total = (fraction * labels.len() as f64).round() as usize;
    let exact: Vec<f64> = by_class.iter().map(|c| fraction * c.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = total.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(num_classes * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        second.extend_from_slice(&members[..quota[c]]);
        first.extend_from_slice(&members[quota[c]..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Train / validation / calibration / optional test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    /// Random subset of `train` used for BN recalibration.
    pub calib: Dataset,
    pub test: Option<Dataset>,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_calib_samples() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", deny_unknown_fields)]
pub enum DatasetSource {
    #[serde(rename = "cifar10-binary")]
    Cifar10Binary {
        files: Vec<PathBuf>,
        #[serde(default)]
        test_files: Vec<PathBuf>,
        #[serde(default = "default_classes")]
        num_classes: usize,
    },
    #[serde(rename = "synthetic")]
    Synthetic(SyntheticConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic(SyntheticConfig::default()),
            val_fraction: default_val_fraction(),
            calib_samples: default_calib_samples(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            bail!(InvalidConfig, "val_fraction must lie in (0, 1), got {}", self.val_fraction);
        }
        if self.calib_samples == 0 {
            bail!(InvalidConfig, "calib_samples must be positive");
        }
        if let DatasetSource::Cifar10Binary { files, .. } = &self.source {
            for f in files {
                if !f.exists() {
                    bail!(InvalidConfig, "dataset file {} does not exist", f.display());
                }
            }
        }
        Ok(())
    }

    /// Relative file paths are resolved against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSource::Cifar10Binary { files, test_files, .. } = &mut self.source {
            for f in files.iter_mut().chain(test_files.iter_mut()) {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.source {
            DatasetSource::Cifar10Binary { num_classes, .. } => *num_classes,
            DatasetSource::Synthetic(s) => s.num_classes,
        }
    }

    pub fn image_size(&self) -> usize {
        match &self.source {
            DatasetSource::Cifar10Binary { .. } => 32,
            DatasetSource::Synthetic(s) => s.image_size,
        }
    }
}

/// Loads the source and carves the seeded splits.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Splits> {
    cfg.validate()?;
    let (full, test) = match &cfg.source {
        DatasetSource::Cifar10Binary {
            files,
            test_files,
            num_classes,
        } => {
            let test = if test_files.is_empty() {
                None
            } else {
                Some(load_cifar10(test_files, *num_classes)?)
            };
            (load_cifar10(files, *num_classes)?, test)
        }
        DatasetSource::Synthetic(s) => (synthetic(s, seed)?, None),
    };
    split(full, test, cfg.val_fraction, cfg.calib_samples, seed)
}

pub fn split(full: Dataset, test: Option<Dataset>, val_fraction: f64, calib_samples: usize, seed: u64) -> Result<Splits> {
    let (train_idx, val_idx) = stratified_split(&full.labels, full.num_classes, val_fraction, seed ^ 0x5eed_5b17);
    if train_idx.is_empty() || val_idx.is_empty() {
        bail!(InvalidConfig, "dataset of {} examples too small to split", full.len());
    }
    let train = full.subset(&train_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11_b7a7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(calib_samples.min(train.len()));
    order.sort_unstable();
    let calib = train.subset(&order);
    let val = full.subset(&val_idx);
    Ok(Splits { train, val, calib, test })
}

/// Random crop from a zero-padded image plus horizontal flip, in place.
pub fn augment<R: Rng + ?Sized>(x: &mut Tensor, pad: usize, flip: bool, rng: &mut R) {
    let [n, c, h, w] = x.dims4().expect("4-d image batch");
    let mut tmp = vec![0.0f32; h * w];
    for i in 0..n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let mirror = flip && rng.random_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            let plane = &mut x.data_mut()[base..base + h * w];
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if mirror { (w - 1 - xx) as isize } else { xx as isize };
                    let sx = sx0 + dx;
                    tmp[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        plane[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
            plane.copy_from_slice(&tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, CIFAR_RECORD - 1));
        r
    }

    #[test]
    fn parses_records() {
        let bytes: Vec<u8> = (0..4).flat_map(|i| record(i, i * 10)).collect();
        let ds = parse_cifar10(&bytes, 10).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
        assert_eq!(ds.image(2)[100], 20);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(1, 0);
        bytes.extend_from_slice(&record(2, 0)[..100]);
        match parse_cifar10(&bytes, 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let bytes: Vec<u8> = [record(3, 0), record(10, 0)].concat();
        match parse_cifar10(&bytes, 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_uses_all_classes() {
        let cfg = SyntheticConfig {
            samples: 600,
            image_size: 16,
            num_classes: 4,
            seed: Some(11),
        };
        let a = synthetic(&cfg, 0).unwrap();
        let b = synthetic(&cfg, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.class_counts().iter().all(|&c| c > 60), "{:?}", a.class_counts());
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
        let (train, val) = stratified_split(&labels, 10, 0.1, 3);
        assert_eq!((train.len(), val.len()), (45_000, 5_000));
        let mut counts = [0usize; 10];
        for &i in &val {
            counts[labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 500));
    }

    #[test]
    fn flip_without_shift_mirrors_rows() {
        let mut x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20 {
            let mut y = x.clone();
            augment(&mut y, 0, true, &mut rng);
            seen.insert(y.data().iter().map(|v| *v as i32).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 2);
        augment(&mut x, 0, false, &mut rng);
        assert_eq!(x.data(), &[1.0, 2.0, 3.0]);
    }
}
