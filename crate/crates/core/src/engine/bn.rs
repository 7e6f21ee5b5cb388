use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{bail, Result};

pub const DEFAULT_BN_MOMENTUM: f32 = 0.1;
pub const DEFAULT_BN_EPS: f32 = 1e-5;

/// Running per-channel statistics of one batch-normalization layer.
///
/// Layers that sit behind a channel-searched convolution are allocated at the
/// maximum width; a forward pass with `C` channels reads and updates the
/// first `C` entries only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize by batch statistics and fold them into the running
    /// statistics with the given momentum.
    Train { momentum: f32 },
    /// Normalize by the running statistics.
    Eval,
    /// Replace the running statistics with the exact (biased) statistics of
    /// this batch and normalize by them.
    Calibrate,
}

impl BnMode {
    pub fn train() -> Self {
        BnMode::Train {
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

pub(crate) struct BnSaved {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub batch_stats: bool,
}

/// Sum of `f(i)` over a plane, in eight f32 lanes widened to f64 at the end.
#[inline]
fn lane_sum(len: usize, f: impl Fn(usize) -> f32) -> f64 {
    let mut lanes = [0.0f32; 8];
    let full = len / 8 * 8;
    for base in (0..full).step_by(8) {
        for (j, l) in lanes.iter_mut().enumerate() {
            *l += f(base + j);
        }
    }
    let mut tail = 0.0f32;
    for i in full..len {
        tail += f(i);
    }
    lanes.iter().map(|&v| v as f64).sum::<f64>() + tail as f64
}

pub(crate) fn bn_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    stats: &mut BnStats,
    mode: BnMode,
    eps: f32,
) -> Result<(Tensor, BnSaved)> {
    if !(eps > 0.0) {
        bail!(InvalidConfig, "batch-norm epsilon must be positive, got {eps}");
    }
    let [n, c, h, w] = x.dims4()?;
    if gamma.len() != c || beta.len() != c || stats.channels() < c {
        bail!(
            InvalidShape,
            "batch norm over {c} channels with gamma {}, beta {}, stats {}",
            gamma.len(),
            beta.len(),
            stats.channels()
        );
    }
    let hw = h * w;
    let count = n * hw;
    if mode.uses_batch_stats() && count < 2 {
        bail!(
            InvalidShape,
            "batch statistics need at least 2 values per channel, got {count}"
        );
    }
    let data = x.data();
    let mut inv_std = vec![0.0f32; c];
    let mut mean_c = vec![0.0f32; c];
    for ch in 0..c {
        let (mean, var) = if mode.uses_batch_stats() {
            let mut sum = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                let p = &data[off..off + hw];
                sum += lane_sum(hw, |i| p[i]);
            }
            let mean = sum / count as f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                let p = &data[off..off + hw];
                let m = mean as f32;
                sq += lane_sum(hw, |i| (p[i] - m) * (p[i] - m));
            }
            let var = sq / count as f64;
            match mode {
                BnMode::Train { momentum } => {
                    let m = momentum as f64;
                    let unbiased = sq / (count - 1) as f64;
                    stats.mean[ch] = ((1.0 - m) * stats.mean[ch] as f64 + m * mean) as f32;
                    stats.var[ch] = ((1.0 - m) * stats.var[ch] as f64 + m * unbiased) as f32;
                }
                BnMode::Calibrate => {
                    stats.mean[ch] = mean as f32;
                    stats.var[ch] = var as f32;
                }
                BnMode::Eval => unreachable!(),
            }
            (mean as f32, var as f32)
        } else {
            (stats.mean[ch], stats.var[ch])
        };
        mean_c[ch] = mean;
        inv_std[ch] = 1.0 / (var.max(0.0) + eps).sqrt();
    }
    let mut xhat = vec![0.0f32; data.len()];
    let mut y = vec![0.0f32; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (m, s, g, bt) = (mean_c[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = &data[off..off + hw];
            for ((&v, xh), yv) in src.iter().zip(&mut xhat[off..off + hw]).zip(&mut y[off..off + hw]) {
                *xh = (v - m) * s;
                *yv = g * *xh + bt;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        BnSaved {
            xhat,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub(crate) fn bn_backward(
    saved: &BnSaved,
    shape: &[usize],
    gamma: &[f32],
    gy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * hw) as f32;
    let mut gx = vec![0.0f32; gy.len()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            let (g, xh) = (&gy[off..off + hw], &saved.xhat[off..off + hw]);
            sum_g += lane_sum(hw, |i| g[i]);
            sum_gx += lane_sum(hw, |i| g[i] * xh[i]);
        }
        ggamma[ch] = sum_gx as f32;
        gbeta[ch] = sum_g as f32;
        let scale = gamma[ch] * saved.inv_std[ch];
        if saved.batch_stats {
            let mean_g = (sum_g / count as f64) as f32;
            let mean_gx = (sum_gx / count as f64) as f32;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                let it = gx[off..off + hw].iter_mut().zip(&gy[off..off + hw]).zip(&saved.xhat[off..off + hw]);
                for ((d, &g), &xh) in it {
                    *d = scale * (g - mean_g - xh * mean_gx);
                }
            }
        } else {
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for (d, &g) in gx[off..off + hw].iter_mut().zip(&gy[off..off + hw]) {
                    *d = scale * g;
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Eager, Graph, Tensor};

    fn run(x: Tensor, gamma: f32, beta: f32, stats: &mut BnStats, mode: BnMode, eps: f32) -> Result<Tensor> {
        let c = x.shape()[1];
        let mut g = Eager::new();
        let x = g.input(x);
        let ga = g.input(Tensor::full(&[c], gamma));
        let be = g.input(Tensor::full(&[c], beta));
        g.batch_norm(&x, &ga, &be, stats, mode, eps).map(|t| (*t).clone())
    }

    #[test]
    fn train_mode_hand_values() {
        let x = Tensor::new(vec![4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut s = BnStats::new(1);
        let y = run(x, 1.0, 0.0, &mut s, BnMode::train(), 1e-12).unwrap();
        for (a, b) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // Running statistics move by momentum 0.1 toward (2.5, 5/3); the
        // running variance takes the unbiased estimate.
        assert!((s.mean[0] - 0.25).abs() < 1e-6);
        assert!((s.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn eval_identity_and_affine_collapse() {
        let data = vec![-3.0, 0.5, 2.0, 7.0];
        let x = Tensor::new(vec![1, 2, 1, 2], data.clone()).unwrap();
        let y = run(x.clone(), 1.0, 0.0, &mut BnStats::new(2), BnMode::Eval, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-4);
        }
        let y = run(x, 0.0, 7.0, &mut BnStats::new(2), BnMode::train(), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn calibrate_replaces_statistics() {
        let x = Tensor::new(vec![4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut s = BnStats::new(1);
        run(x, 1.0, 0.0, &mut s, BnMode::Calibrate, 1e-5).unwrap();
        assert!((s.mean[0] - 2.5).abs() < 1e-6 && (s.var[0] - 1.25).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros(&[2, 3, 1, 1]);
        assert!(run(x.clone(), 1.0, 0.0, &mut BnStats::new(2), BnMode::Eval, 1e-5).is_err());
        assert!(matches!(
            run(x, 1.0, 0.0, &mut BnStats::new(3), BnMode::Eval, 0.0),
            Err(crate::Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn batch_statistics_normalize() {
        let data: Vec<f32> = (0..8 * 3 * 5 * 5).map(|i| ((i * 7919) % 101) as f32 * 0.3 - 4.0).collect();
        let x = Tensor::new(vec![8, 3, 5, 5], data).unwrap();
        let y = run(x, 1.0, 0.0, &mut BnStats::new(3), BnMode::train(), 1e-5).unwrap();
        for c in 0..3 {
            let v: Vec<f64> = (0..8).flat_map(|b| y.data()[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).map(f64::from).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}
