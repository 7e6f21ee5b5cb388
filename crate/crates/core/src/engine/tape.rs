use std::sync::atomic::{AtomicU64, Ordering};

use super::bn::{bn_backward, bn_forward, BnMode, BnSaved, BnStats};
use super::conv::{conv2d_backward, conv2d_forward, ConvParams};
use super::graph::Graph;
use super::ops;
use super::params::{Extent, ParamId, ParamStore};
use super::quant;
use super::tensor::Tensor;
use crate::error::{bail, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Input,
    Constant,
    Param { id: ParamId, extent: Extent },
    Conv { x: usize, k: usize, p: ConvParams },
    Bn { x: usize, gamma: usize, beta: usize, saved: BnSaved },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Gap { x: usize },
    Narrow { x: usize, start: usize, len: usize },
    Concat { parts: Vec<usize> },
    Shuffle { x: usize, groups: usize },
    MaxPool { x: usize, arg: Vec<usize> },
    QuantAct { x: usize, alpha: usize },
    QuantWeight { w: usize },
    SoftmaxCe { logits: usize, probs: Vec<f32>, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so every node's inputs precede it and the backward sweep is a
/// reverse scan.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn val(&self, v: &Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: &Var) -> Option<&[f32]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from the scalar `loss`. Parameter gradients are
    /// accumulated into `store`; parameters that never entered the tape keep
    /// no gradient at all.
    pub fn backward(&mut self, loss: &Var, store: &mut ParamStore) -> Result<()> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            bail!(InvalidTape, "loss was not produced by this tape");
        }
        if self.nodes[loss.index].value.numel() != 1 {
            bail!(
                InvalidTape,
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            );
        }
        self.backward_from(loss, vec![1.0], store)
    }

    /// Reverse sweep from `out` with upstream gradient `seed` (a
    /// vector-Jacobian product).
    pub fn backward_from(&mut self, out: &Var, seed: Vec<f32>, store: &mut ParamStore) -> Result<()> {
        if out.tape != self.id || out.index >= self.nodes.len() {
            bail!(InvalidTape, "variable was not produced by this tape");
        }
        if seed.len() != self.nodes[out.index].value.numel() {
            bail!(
                InvalidTape,
                "seed gradient has {} values for an output of shape {:?}",
                seed.len(),
                self.nodes[out.index].value.shape()
            );
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.index] = Some(seed);

        fn acc(grads: &mut [Option<Vec<f32>>], i: usize, g: Vec<f32>) {
            match &mut grads[i] {
                Some(buf) => {
                    for (d, s) in buf.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.index).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::Param { id, extent } => store.accumulate_grad(*id, *extent, &gy),
                Op::Conv { x, k, p } => {
                    let want_gx = !matches!(self.nodes[*x].op, Op::Constant);
                    let (gx, gk) = conv2d_backward(&self.nodes[*x].value, &self.nodes[*k].value, *p, &gy, want_gx)?;
                    if want_gx {
                        acc(&mut grads, *x, gx);
                    }
                    acc(&mut grads, *k, gk);
                }
                Op::Bn { x, gamma, beta, saved } => {
                    let (gx, gg, gb) = bn_backward(
                        saved,
                        self.nodes[*x].value.shape(),
                        self.nodes[*gamma].value.data(),
                        &gy,
                    );
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::Relu { x } => {
                    let gx = ops::relu_backward(&self.nodes[*x].value, &gy);
                    acc(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy.clone());
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(&self.nodes[*x].value, &self.nodes[*w].value, &gy);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Gap { x } => {
                    let gx = ops::gap_backward(self.nodes[*x].value.shape(), &gy);
                    acc(&mut grads, *x, gx);
                }
                Op::Narrow { x, start, len } => {
                    let gx = ops::narrow_backward(self.nodes[*x].value.shape(), *start, *len, &gy);
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { parts } => {
                    let channels: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.shape()[1]).collect();
                    let gs = ops::concat_backward(&channels, node.value.shape(), &gy);
                    for (&p, g) in parts.iter().zip(gs) {
                        acc(&mut grads, p, g);
                    }
                }
                Op::Shuffle { x, groups } => {
                    let gx = ops::shuffle_backward(node.value.shape(), *groups, &gy);
                    acc(&mut grads, *x, gx);
                }
                Op::MaxPool { x, arg } => {
                    let gx = ops::maxpool_backward(self.nodes[*x].value.numel(), arg, &gy);
                    acc(&mut grads, *x, gx);
                }
                Op::QuantAct { x, alpha } => {
                    let a = self.nodes[*alpha].value.data()[0];
                    let (gx, ga) = quant::quantize_activation_backward(self.nodes[*x].value.data(), a, &gy);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *alpha, vec![ga]);
                }
                Op::QuantWeight { w } => {
                    let gw = quant::quantize_weight_backward(self.nodes[*w].value.data(), &gy);
                    acc(&mut grads, *w, gw);
                }
                Op::SoftmaxCe { logits, probs, labels } => {
                    let k = self.nodes[*logits].value.shape()[1];
                    let g = ops::softmax_ce_backward(probs, labels, k, gy[0]);
                    acc(&mut grads, *logits, g);
                }
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }
}

impl Graph for Tape {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(v)
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId, extent: Extent) -> Result<Var> {
        let t = store.view(id, extent)?.to_tensor();
        Ok(self.push(t, Op::Param { id, extent }))
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, p: ConvParams) -> Result<Var> {
        let (y, _) = conv2d_forward(self.val(x), self.val(kernel), p)?;
        let (x, k) = (self.idx(x), self.idx(kernel));
        Ok(self.push(y, Op::Conv { x, k, p }))
    }

    fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: &mut BnStats,
        mode: BnMode,
        eps: f32,
    ) -> Result<Var> {
        let (y, saved) = bn_forward(
            self.val(x),
            self.val(gamma).data(),
            self.val(beta).data(),
            stats,
            mode,
            eps,
        )?;
        let op = Op::Bn {
            x: self.idx(x),
            gamma: self.idx(gamma),
            beta: self.idx(beta),
            saved,
        };
        Ok(self.push(y, op))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let y = ops::relu_forward(self.val(x));
        let x = self.idx(x);
        Ok(self.push(y, Op::Relu { x }))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add_forward(self.val(a), self.val(b))?;
        let (a, b) = (self.idx(a), self.idx(b));
        Ok(self.push(y, Op::Add { a, b }))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = ops::linear_forward(self.val(x), self.val(w), b.map(|b| self.val(b)))?;
        let op = Op::Linear {
            x: self.idx(x),
            w: self.idx(w),
            b: b.map(|b| self.idx(b)),
        };
        Ok(self.push(y, op))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let y = ops::gap_forward(self.val(x))?;
        let x = self.idx(x);
        Ok(self.push(y, Op::Gap { x }))
    }

    fn narrow_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow_forward(self.val(x), start, len)?;
        let x = self.idx(x);
        Ok(self.push(y, Op::Narrow { x, start, len }))
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let y = {
            let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(p)).collect();
            ops::concat_forward(&refs)?
        };
        let parts = parts.iter().map(|p| self.idx(p)).collect();
        Ok(self.push(y, Op::Concat { parts }))
    }

    fn channel_shuffle(&mut self, x: &Var, groups: usize) -> Result<Var> {
        let y = ops::shuffle_forward(self.val(x), groups)?;
        let x = self.idx(x);
        Ok(self.push(y, Op::Shuffle { x, groups }))
    }

    fn max_pool2d(&mut self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, arg) = ops::maxpool_forward(self.val(x), kernel, stride, padding)?;
        let x = self.idx(x);
        Ok(self.push(y, Op::MaxPool { x, arg }))
    }

    fn quantize_activation(&mut self, x: &Var, alpha: &Var, bits: u32) -> Result<Var> {
        let xv = self.val(x);
        let y = quant::quantize_activation(xv.data(), self.val(alpha).data()[0], bits)?;
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        let (x, alpha) = (self.idx(x), self.idx(alpha));
        Ok(self.push(y, Op::QuantAct { x, alpha }))
    }

    fn quantize_weight(&mut self, w: &Var, bits: u32) -> Result<Var> {
        let wv = self.val(w);
        let y = Tensor::from_parts(wv.shape().to_vec(), quant::quantize_weight(wv.data(), bits)?);
        let w = self.idx(w);
        Ok(self.push(y, Op::QuantWeight { w }))
    }

    fn softmax_cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_ce_forward(self.val(logits), labels)?;
        let logits = self.idx(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.input(Tensor::scalar(1.0));
        b.input(Tensor::scalar(1.0));
        assert!(matches!(b.backward(&x, &mut ParamStore::new()), Err(crate::Error::InvalidTape(_))));
    }

    #[test]
    fn unused_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::full(&[1, 2], 0.5));
        let unused = store.add("unused", Tensor::full(&[1, 2], 0.5));
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let w = t.param(&store, used, store.full_extent(used)).unwrap();
        let y = t.linear(&x, &w, None).unwrap();
        let loss = t.softmax_cross_entropy(&y, &[0]).unwrap();
        t.backward(&loss, &mut store).unwrap();
        assert!(store.get(used).grad().is_some());
        assert!(store.get(unused).grad().is_none());
    }

    #[test]
    fn constant_loss_gives_zero_parameter_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2, 2], 1.0));
        let mut t = Tape::new();
        let w = t.param(&store, id, store.full_extent(id)).unwrap();
        let x = t.input(Tensor::zeros(&[1, 2]));
        let y = t.linear(&x, &w, None).unwrap();
        let loss = t.softmax_cross_entropy(&y, &[1]).unwrap();
        t.backward(&loss, &mut store).unwrap();
        assert!(store.get(id).grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
