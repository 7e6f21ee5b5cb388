//! Forward-only graph that measures, at every eval-mode batch norm, the
//! per-channel moments of the normalized input `(x - mean) / sqrt(var + eps)`.

use std::rc::Rc;

use spos::engine::{BnMode, BnStats, ConvParams, Eager, Extent, Graph, ParamId, ParamStore, Tensor};
use spos::Result;

/// Moments of one channel at one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct ChannelMoments {
    pub layer: usize,
    pub channel: usize,
    pub mean: f64,
    pub var: f64,
}

#[derive(Default)]
pub struct BnProbe {
    inner: Eager,
    pub layers: usize,
    pub moments: Vec<ChannelMoments>,
}

impl Graph for BnProbe {
    type Var = Rc<Tensor>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor {
        v
    }
    fn input(&mut self, t: Tensor) -> Self::Var {
        self.inner.input(t)
    }
    fn param(&mut self, store: &ParamStore, id: ParamId, extent: Extent) -> Result<Self::Var> {
        self.inner.param(store, id, extent)
    }
    fn conv2d(&mut self, x: &Self::Var, kernel: &Self::Var, p: ConvParams) -> Result<Self::Var> {
        self.inner.conv2d(x, kernel, p)
    }
    fn batch_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        stats: &mut BnStats,
        mode: BnMode,
        eps: f32,
    ) -> Result<Self::Var> {
        if mode == BnMode::Eval {
            let [n, c, h, w] = x.dims4()?;
            let hw = h * w;
            for ch in 0..c {
                let inv = 1.0 / (stats.var[ch] as f64 + eps as f64).sqrt();
                let m = stats.mean[ch] as f64;
                let vals = || (0..n).flat_map(|b| x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&v| (v as f64 - m) * inv));
                let cnt = (n * hw) as f64;
                let mean = vals().sum::<f64>() / cnt;
                let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / cnt;
                self.moments.push(ChannelMoments {
                    layer: self.layers,
                    channel: ch,
                    mean,
                    var,
                });
            }
            self.layers += 1;
        }
        self.inner.batch_norm(x, gamma, beta, stats, mode, eps)
    }
    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.inner.relu(x)
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.inner.add(a, b)
    }
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var> {
        self.inner.linear(x, w, b)
    }
    fn global_avg_pool(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.inner.global_avg_pool(x)
    }
    fn narrow_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        self.inner.narrow_channels(x, start, len)
    }
    fn concat_channels(&mut self, parts: &[Self::Var]) -> Result<Self::Var> {
        self.inner.concat_channels(parts)
    }
    fn channel_shuffle(&mut self, x: &Self::Var, groups: usize) -> Result<Self::Var> {
        self.inner.channel_shuffle(x, groups)
    }
    fn max_pool2d(&mut self, x: &Self::Var, kernel: usize, stride: usize, padding: usize) -> Result<Self::Var> {
        self.inner.max_pool2d(x, kernel, stride, padding)
    }
    fn quantize_activation(&mut self, x: &Self::Var, alpha: &Self::Var, bits: u32) -> Result<Self::Var> {
        self.inner.quantize_activation(x, alpha, bits)
    }
    fn quantize_weight(&mut self, w: &Self::Var, bits: u32) -> Result<Self::Var> {
        self.inner.quantize_weight(w, bits)
    }
    fn softmax_cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var> {
        self.inner.softmax_cross_entropy(logits, labels)
    }
}
