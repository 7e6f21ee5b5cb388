use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{BnStats, ParamId, ParamStore, PrefixView, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BnId(pub usize);

/// Running statistics of every batch-norm layer, addressed by [`BnId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    entries: Vec<(String, BnStats)>,
}

impl RunningStats {
    pub(crate) fn add(&mut self, name: String, channels: usize) -> BnId {
        self.entries.push((name, BnStats::new(channels)));
        BnId(self.entries.len() - 1)
    }

    pub fn get(&self, id: BnId) -> &BnStats {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: BnId) -> &mut BnStats {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: BnId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (BnId, &str, &BnStats)> {
        self.entries.iter().enumerate().map(|(i, (n, s))| (BnId(i), n.as_str(), s))
    }
}

/// Parameters and batch-norm statistics shared by every path of a supernet.
/// Everything is allocated at the largest channel multiplier; narrower
/// choices read prefix slices of the same buffers.
#[derive(Clone, Debug, Default)]
pub struct SharedWeightStore {
    pub params: ParamStore,
    pub stats: RunningStats,
}

pub(crate) const PACT_ALPHA_INIT: f32 = 8.0;

impl SharedWeightStore {
    /// Prefix view `kernel[:c_out, :c_in, ...]`.
    pub fn slice_channel_weights(&self, kernel: ParamId, c_out: usize, c_in: usize) -> Result<PrefixView<'_>> {
        self.params.view(kernel, crate::engine::Extent::new(c_out, c_in))
    }

    /// He-normal kernel of shape `[cout, cin_per_group, k, k]`.
    pub(crate) fn add_kernel<R: Rng>(
        &mut self,
        rng: &mut R,
        name: String,
        cout: usize,
        cin_per_group: usize,
        k: usize,
    ) -> ParamId {
        let fan_in = (cin_per_group * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..cout * cin_per_group * k * k).map(|_| normal.sample(rng)).collect();
        self.params
            .add(name, Tensor::new(vec![cout, cin_per_group, k, k], data).expect("consistent shape"))
    }

    pub(crate) fn add_bn(&mut self, prefix: &str, channels: usize) -> (ParamId, ParamId, BnId) {
        let gamma = self.params.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = self.params.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        let stats = self.stats.add(prefix.to_string(), channels);
        (gamma, beta, stats)
    }

    pub(crate) fn add_alpha(&mut self, name: String) -> ParamId {
        self.params.add(name, Tensor::scalar(PACT_ALPHA_INIT))
    }
}
