//! Forward/backward kernels for the non-convolution primitives.

use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

pub(crate) fn relu_backward(x: &Tensor, gy: &[f32]) -> Vec<f32> {
    x.data()
        .iter()
        .zip(gy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub(crate) fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        bail!(InvalidShape, "add of {:?} and {:?}", a.shape(), b.shape());
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    ))
}

/// `x: N×Cin`, `w: K×Cin`, `b: K` → `N×K`.
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n, cin] = x.dims2()?;
    let [k, wcin] = w.dims2()?;
    if wcin != cin {
        bail!(InvalidShape, "linear weight {:?} on input {:?}", w.shape(), x.shape());
    }
    let mut y = vec![0.0f32; n * k];
    if let Some(b) = b {
        if b.numel() != k {
            bail!(InvalidShape, "linear bias of {} for {k} outputs", b.numel());
        }
        for row in y.chunks_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    super::conv::gemm(n, cin, k, x.data(), false, w.data(), true, &mut y, 1.0);
    Ok(Tensor::from_parts(vec![n, k], y))
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, gy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, cin) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut gx = vec![0.0f32; n * cin];
    let mut gw = vec![0.0f32; k * cin];
    super::conv::gemm(n, k, cin, gy, false, w.data(), false, &mut gx, 0.0);
    super::conv::gemm(k, n, cin, gy, true, x.data(), false, &mut gw, 0.0);
    let mut gb = vec![0.0f32; k];
    for row in gy.chunks(k) {
        for (acc, g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (gx, gw, gb)
}

pub(crate) fn gap_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let y = x
        .data()
        .chunks(hw)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], y))
}

pub(crate) fn gap_backward(shape: &[usize], gy: &[f32]) -> Vec<f32> {
    let hw = shape[2] * shape[3];
    let inv = 1.0 / hw as f32;
    gy.iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect()
}

/// Channels `start..start + len` of an `N×C×H×W` tensor.
pub(crate) fn narrow_forward(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if len == 0 || start + len > c {
        bail!(InvalidShape, "channel range {start}..{} of {c}", start + len);
    }
    let hw = h * w;
    let mut y = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        let off = (b * c + start) * hw;
        y.extend_from_slice(&x.data()[off..off + len * hw]);
    }
    Ok(Tensor::from_parts(vec![n, len, h, w], y))
}

pub(crate) fn narrow_backward(shape: &[usize], start: usize, len: usize, gy: &[f32]) -> Vec<f32> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut gx = vec![0.0f32; n * c * hw];
    for b in 0..n {
        let dst = (b * c + start) * hw;
        let src = b * len * hw;
        gx[dst..dst + len * hw].copy_from_slice(&gy[src..src + len * hw]);
    }
    gx
}

pub(crate) fn concat_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        bail!(InvalidShape, "concat of zero tensors");
    };
    let [n, _, h, w] = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            bail!(InvalidShape, "concat of {:?} with {:?}", first.shape(), p.shape());
        }
        total += pc;
    }
    let hw = h * w;
    let mut y = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            y.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total, h, w], y))
}

pub(crate) fn concat_backward(channels: &[usize], shape: &[usize], gy: &[f32]) -> Vec<Vec<f32>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out: Vec<Vec<f32>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for b in 0..n {
        let mut off = b * c * hw;
        for (g, &pc) in out.iter_mut().zip(channels) {
            g.extend_from_slice(&gy[off..off + pc * hw]);
            off += pc * hw;
        }
    }
    out
}

/// Destination channel of input channel `c` under a `groups`-way shuffle.
pub fn shuffle_destination(c: usize, channels: usize, groups: usize) -> usize {
    (c % groups) * (channels / groups) + c / groups
}

pub(crate) fn shuffle_forward(x: &Tensor, groups: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidShape(format!(
            "channel shuffle of {c} channels into {groups} groups"
        )));
    }
    let hw = h * w;
    let mut y = vec![0.0f32; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let d = shuffle_destination(ch, c, groups);
            let src = (b * c + ch) * hw;
            let dst = (b * c + d) * hw;
            y[dst..dst + hw].copy_from_slice(&x.data()[src..src + hw]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub(crate) fn shuffle_backward(shape: &[usize], groups: usize, gy: &[f32]) -> Vec<f32> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut gx = vec![0.0f32; gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let d = shuffle_destination(ch, c, groups);
            let src = (b * c + d) * hw;
            let dst = (b * c + ch) * hw;
            gx[dst..dst + hw].copy_from_slice(&gy[src..src + hw]);
        }
    }
    gx
}

/// Max pooling with implicit `-inf` padding; returns the output and the flat
/// input index of every window's maximum.
pub(crate) fn maxpool_forward(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    let conv = super::conv::conv_out_size;
    let (Some(ho), Some(wo)) = (conv(h, kernel, stride, padding), conv(w, kernel, stride, padding)) else {
        bail!(InvalidShape, "pool window {kernel} does not fit {h}×{w}");
    };
    if padding >= kernel {
        bail!(InvalidShape, "pool padding {padding} must be below kernel {kernel}");
    }
    let mut y = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0usize; y.len()];
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                let o = (nc * ho + oy) * wo + ox;
                y[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], y), arg))
}

pub(crate) fn maxpool_backward(numel: usize, arg: &[usize], gy: &[f32]) -> Vec<f32> {
    let mut gx = vec![0.0f32; numel];
    for (&i, &g) in arg.iter().zip(gy) {
        gx[i] += g;
    }
    gx
}

/// Mean softmax cross-entropy; returns the loss and the softmax
/// probabilities needed for the gradient.
pub(crate) fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let [n, k] = logits.dims2()?;
    if n == 0 || labels.len() != n {
        bail!(InvalidShape, "{} labels for {n} rows of logits", labels.len());
    }
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max) as f64;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (((v - max) as f64).exp() / sum) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, probs))
}

pub(crate) fn softmax_ce_backward(probs: &[f32], labels: &[usize], k: usize, gloss: f32) -> Vec<f32> {
    let n = labels.len();
    let scale = gloss / n as f32;
    let mut g = probs.to_vec();
    for (row, &label) in g.chunks_mut(k).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Eager, Graph};
    use proptest::prelude::*;

    #[test]
    fn small_examples() {
        let mut g = Eager::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(g.relu(&x).unwrap().data(), &[0.0, 2.0]);
        let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(g.global_avg_pool(&x).unwrap().data(), &[2.5]);
        let x = g.input(Tensor::new(vec![1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        assert_eq!(g.channel_shuffle(&x, 2).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
        let x = g.input(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(g.channel_shuffle(&x, 2), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Eager::new();
        let x = g.input(Tensor::zeros(&[2, 10]));
        let l = g.softmax_cross_entropy(&x, &[3, 7]).unwrap();
        assert!((l.data()[0] - 10f32.ln()).abs() < 1e-6);
        let x = g.input(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let l = g.softmax_cross_entropy(&x, &[0]).unwrap();
        assert!(l.data()[0].abs() < 1e-6);
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let l = g.softmax_cross_entropy(&x, &[1]).unwrap();
        assert!((l.data()[0] - 0.31326).abs() < 1e-5);
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.softmax_cross_entropy(&x, &[2]),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        ));
    }

    proptest! {
        #[test]
        fn shuffle_is_a_bijection(groups in 1usize..6, per in 1usize..6) {
            let c = groups * per;
            let mut seen = vec![false; c];
            for i in 0..c {
                let d = shuffle_destination(i, c, groups);
                prop_assert!(d < c && !seen[d]);
                seen[d] = true;
            }
        }

        #[test]
        fn double_shuffle_composes(per in 1usize..8) {
            let c = 2 * per;
            let data: Vec<f32> = (0..c).map(|i| i as f32).collect();
            let mut g = Eager::new();
            let x = g.input(Tensor::new(vec![1, c, 1, 1], data).unwrap());
            let once = g.channel_shuffle(&x, 2).unwrap();
            let twice = g.channel_shuffle(&once, 2).unwrap();
            for i in 0..c {
                let d = shuffle_destination(shuffle_destination(i, c, 2), c, 2);
                prop_assert_eq!(twice.data()[d], i as f32);
            }
        }
    }
}
