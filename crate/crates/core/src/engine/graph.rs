use std::rc::Rc;

use super::bn::{bn_forward, BnMode, BnStats};
use super::conv::{conv2d_forward, ConvParams};
use super::ops;
use super::params::{Extent, ParamId, ParamStore};
use super::quant;
use super::tensor::Tensor;
use crate::error::Result;

/// The primitive set networks are written against.
///
/// [`Tape`](super::Tape) records every call for reverse-mode
/// differentiation; [`Eager`] only computes values and drops intermediates as
/// soon as the caller does.
pub trait Graph {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    fn input(&mut self, t: Tensor) -> Self::Var;
    /// Leaf that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Var {
        self.input(t)
    }
    /// Leaf for the prefix slice `extent` of a stored parameter.
    fn param(&mut self, store: &ParamStore, id: ParamId, extent: Extent) -> Result<Self::Var>;
    fn conv2d(&mut self, x: &Self::Var, kernel: &Self::Var, p: ConvParams) -> Result<Self::Var>;
    fn batch_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        stats: &mut BnStats,
        mode: BnMode,
        eps: f32,
    ) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var>;
    fn global_avg_pool(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn narrow_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn concat_channels(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn channel_shuffle(&mut self, x: &Self::Var, groups: usize) -> Result<Self::Var>;
    fn max_pool2d(&mut self, x: &Self::Var, kernel: usize, stride: usize, padding: usize) -> Result<Self::Var>;
    fn quantize_activation(&mut self, x: &Self::Var, alpha: &Self::Var, bits: u32) -> Result<Self::Var>;
    fn quantize_weight(&mut self, w: &Self::Var, bits: u32) -> Result<Self::Var>;
    fn softmax_cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var>;
}

/// Forward-only evaluation. Also counts the multiply-accumulates executed by
/// convolutions and linear layers.
#[derive(Debug, Default)]
pub struct Eager {
    macs: u64,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }
}

impl Graph for Eager {
    type Var = Rc<Tensor>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor {
        v
    }

    fn input(&mut self, t: Tensor) -> Self::Var {
        Rc::new(t)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId, extent: Extent) -> Result<Self::Var> {
        Ok(Rc::new(store.view(id, extent)?.to_tensor()))
    }

    fn conv2d(&mut self, x: &Self::Var, kernel: &Self::Var, p: ConvParams) -> Result<Self::Var> {
        let (y, geom) = conv2d_forward(x, kernel, p)?;
        self.macs += geom.macs();
        Ok(Rc::new(y))
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
        let (y, _) = bn_forward(x, gamma.data(), beta.data(), stats, mode, eps)?;
        Ok(Rc::new(y))
    }

    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(ops::relu_forward(x)))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(ops::add_forward(a, b)?))
    }

    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var> {
        let y = ops::linear_forward(x, w, b.map(|b| &**b))?;
        self.macs += w.numel() as u64 * x.shape()[0] as u64;
        Ok(Rc::new(y))
    }

    fn global_avg_pool(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(ops::gap_forward(x)?))
    }

    fn narrow_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        Ok(Rc::new(ops::narrow_forward(x, start, len)?))
    }

    fn concat_channels(&mut self, parts: &[Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &**p).collect();
        Ok(Rc::new(ops::concat_forward(&refs)?))
    }

    fn channel_shuffle(&mut self, x: &Self::Var, groups: usize) -> Result<Self::Var> {
        Ok(Rc::new(ops::shuffle_forward(x, groups)?))
    }

    fn max_pool2d(&mut self, x: &Self::Var, kernel: usize, stride: usize, padding: usize) -> Result<Self::Var> {
        Ok(Rc::new(ops::maxpool_forward(x, kernel, stride, padding)?.0))
    }

    fn quantize_activation(&mut self, x: &Self::Var, alpha: &Self::Var, bits: u32) -> Result<Self::Var> {
        let y = quant::quantize_activation(x.data(), alpha.data()[0], bits)?;
        Ok(Rc::new(Tensor::from_parts(x.shape().to_vec(), y)))
    }

    fn quantize_weight(&mut self, w: &Self::Var, bits: u32) -> Result<Self::Var> {
        let y = quant::quantize_weight(w.data(), bits)?;
        Ok(Rc::new(Tensor::from_parts(w.shape().to_vec(), y)))
    }

    fn softmax_cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var> {
        let (loss, _) = ops::softmax_ce_forward(logits, labels)?;
        Ok(Rc::new(Tensor::scalar(loss)))
    }
}
