//! Fixed sampling priors over the architecture space: plain uniform and
//! constraint-uniform (uniform over equal-width cost bins).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, Metric};
use crate::error::{bail, Result};
use crate::space::{Architecture, Gene, SearchSpace};

/// Draws every gene axis independently and uniformly.
pub fn sample_uniform<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Architecture {
    let genes = (0..space.num_blocks())
        .map(|b| {
            let [nv, nc, nq] = space.axes(b);
            Gene::new(
                rng.random_range(0..nv) as u8,
                rng.random_range(0..nc) as u8,
                rng.random_range(0..nq) as u8,
            )
        })
        .collect();
    Architecture::new(genes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Uniform,
    ConstraintUniform,
}

fn default_bins() -> usize {
    10
}

fn default_tries() -> usize {
    100
}

fn default_presamples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub strategy: Strategy,
    /// Binned metric for the constraint-uniform strategy.
    #[serde(default)]
    pub metric: Option<Metric>,
    /// `[lo, hi]` of the bins; defaults to the range seen in `presamples`
    /// uniform draws.
    #[serde(default)]
    pub range: Option<(f64, f64)>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Rejection tries per chosen bin.
    #[serde(default = "default_tries")]
    pub max_tries: usize,
    #[serde(default = "default_presamples")]
    pub presamples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Uniform,
            metric: None,
            range: None,
            bins: default_bins(),
            max_tries: default_tries(),
            presamples: default_presamples(),
        }
    }
}

impl SamplerConfig {
    pub fn constraint_uniform(metric: Metric) -> Self {
        Self {
            strategy: Strategy::ConstraintUniform,
            metric: Some(metric),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.max_tries == 0 {
            bail!(InvalidConfig, "sampler needs at least one bin and one try per bin");
        }
        if let Some((lo, hi)) = self.range {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                bail!(InvalidConfig, "sampler range [{lo}, {hi}] must satisfy lo < hi");
            }
        }
        if self.strategy == Strategy::ConstraintUniform {
            if self.metric.is_none() {
                bail!(InvalidConfig, "constraint-uniform sampling needs a metric");
            }
            if self.range.is_none() && self.presamples == 0 {
                bail!(InvalidConfig, "constraint-uniform sampling needs a range or presamples");
            }
        }
        Ok(())
    }
}

/// Equal-width bins over `[lo, hi]`; the last bin includes `hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bins {
    pub metric: Metric,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Bins {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let w = self.width();
        let hi = if i + 1 == self.count { self.hi } else { self.lo + w * (i + 1) as f64 };
        (self.lo + w * i as f64, hi)
    }

    /// Bin containing `value`, if any.
    pub fn index(&self, value: f64) -> Option<usize> {
        if !(value >= self.lo && value <= self.hi) {
            return None;
        }
        let i = ((value - self.lo) / self.width()) as usize;
        let i = i.min(self.count - 1);
        // Guard against rounding at interior edges.
        let (a, b) = self.bounds(i);
        if value < a {
            Some(i - 1)
        } else if value >= b && i + 1 < self.count {
            Some(i + 1)
        } else {
            Some(i)
        }
    }
}

/// Resolved sampling prior.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    Uniform,
    ConstraintUniform { bins: Bins, max_tries: usize },
}

impl Sampler {
    /// Resolves `cfg` against a cost model, pre-sampling the metric range when
    /// none is configured. A space whose metric takes a single value falls
    /// back to uniform sampling.
    pub fn new<R: Rng + ?Sized>(cfg: &SamplerConfig, model: &CostModel, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.strategy == Strategy::Uniform {
            return Ok(Sampler::Uniform);
        }
        let metric = cfg.metric.expect("validated");
        let (lo, hi) = match cfg.range {
            Some(r) => r,
            None => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for _ in 0..cfg.presamples {
                    let v = model.metric(&sample_uniform(model.space(), rng), metric)?;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                if !(lo < hi) {
                    return Ok(Sampler::Uniform);
                }
                (lo, hi)
            }
        };
        Ok(Sampler::ConstraintUniform {
            bins: Bins {
                metric,
                lo,
                hi,
                count: cfg.bins,
            },
            max_tries: cfg.max_tries,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, model: &CostModel, rng: &mut R) -> Result<Architecture> {
        match self {
            Sampler::Uniform => Ok(sample_uniform(model.space(), rng)),
            Sampler::ConstraintUniform { bins, max_tries } => sample_constraint_uniform(model, bins, *max_tries, rng),
        }
    }
}

/// Picks a bin uniformly, then rejection-samples uniform architectures until
/// one lands in it (at most `max_tries` per bin, `bins·max_tries` overall).
pub fn sample_constraint_uniform<R: Rng + ?Sized>(
    model: &CostModel,
    bins: &Bins,
    max_tries: usize,
    rng: &mut R,
) -> Result<Architecture> {
    let mut failed = vec![false; bins.count];
    let mut budget = bins.count * max_tries;
    while budget > 0 {
        let bin = rng.random_range(0..bins.count);
        let (a, b) = bins.bounds(bin);
        for _ in 0..max_tries.min(budget) {
            budget -= 1;
            let arch = sample_uniform(model.space(), rng);
            let v = model.metric(&arch, bins.metric)?;
            if bins.index(v) == Some(bin) {
                return Ok(arch);
            }
        }
        log::debug!("{} bin [{a}, {b}] empty after {max_tries} tries", bins.metric);
        failed[bin] = true;
    }
    let empty: Vec<String> = failed
        .iter()
        .enumerate()
        .filter(|(_, f)| **f)
        .map(|(i, _)| {
            let (a, b) = bins.bounds(i);
            format!("[{a}, {b}]")
        })
        .collect();
    bail!(
        InfeasibleSampler,
        "no {} value found after {} tries; empty bins: {}",
        bins.metric,
        bins.count * max_tries,
        empty.join(", ")
    )
}
