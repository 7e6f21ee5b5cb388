//! Simulated low-bit quantization with straight-through gradients.
//!
//! Activations use a learnable clipping level `alpha` (PACT): values are
//! clipped to `[0, alpha]` and rounded onto `2^bits - 1` uniform steps.
//! Weights use the tanh-normalized DoReFa map onto `2^bits` levels in
//! `[-1, 1]`.

use crate::error::{bail, Result};

pub const MAX_BITS: u32 = 4;

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        bail!(InvalidConfig, "bit width must be in 1..={MAX_BITS}, got {bits}");
    }
    Ok(())
}

fn steps(bits: u32) -> f32 {
    ((1u32 << bits) - 1) as f32
}

pub(crate) fn quantize_activation(x: &[f32], alpha: f32, bits: u32) -> Result<Vec<f32>> {
    check_bits(bits)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        bail!(InvalidConfig, "activation clip level must be positive, got {alpha}");
    }
    let l = steps(bits);
    let step = alpha / l;
    Ok(x.iter()
        .map(|&v| {
            if v >= alpha {
                alpha
            } else if v <= 0.0 {
                0.0
            } else {
                let q = (v / alpha * l).round();
                if q >= l {
                    alpha
                } else {
                    q * step
                }
            }
        })
        .collect())
}

/// Returns `(grad_x, grad_alpha)`.
pub(crate) fn quantize_activation_backward(x: &[f32], alpha: f32, gy: &[f32]) -> (Vec<f32>, f32) {
    let mut galpha = 0.0f64;
    let gx = x
        .iter()
        .zip(gy)
        .map(|(&v, &g)| {
            if v >= alpha {
                galpha += g as f64;
                0.0
            } else if v < 0.0 {
                0.0
            } else {
                g
            }
        })
        .collect();
    (gx, galpha as f32)
}

fn tanh_scale(w: &[f32]) -> f32 {
    let m = w.iter().map(|v| v.tanh().abs()).fold(0.0f32, f32::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub(crate) fn quantize_weight(w: &[f32], bits: u32) -> Result<Vec<f32>> {
    check_bits(bits)?;
    let l = steps(bits);
    let m = tanh_scale(w);
    Ok(w.iter()
        .map(|&v| {
            let unit = (v.tanh() / (2.0 * m) + 0.5).clamp(0.0, 1.0);
            2.0 * ((unit * l).round() / l) - 1.0
        })
        .collect())
}

/// Straight-through through the rounding; the tanh normalization is
/// differentiated with its max held constant.
pub(crate) fn quantize_weight_backward(w: &[f32], gy: &[f32]) -> Vec<f32> {
    let m = tanh_scale(w);
    w.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let t = v.tanh();
            g * (1.0 - t * t) / m
        })
        .collect()
}
