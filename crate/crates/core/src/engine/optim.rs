use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
}

fn default_momentum() -> f32 {
    0.9
}

fn default_weight_decay() -> f32 {
    4e-5
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            bail!(InvalidConfig, "learning rate must be nonnegative, got {}", self.learning_rate);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(InvalidConfig, "momentum must be in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(InvalidConfig, "weight decay must be nonnegative, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// One SGD-with-momentum update on raw buffers:
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
pub fn sgd_update(param: &mut [f32], grad: &[f32], velocity: &mut [f32], cfg: &SgdConfig, lr: f32) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        bail!(
            InvalidShape,
            "sgd buffers disagree: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        );
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Optimizer state: hyperparameters plus one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl OptState {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> &[f32] {
        &self.velocity[id.0]
    }

    pub fn velocities(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub(crate) fn set_velocity(&mut self, id: ParamId, v: Vec<f32>) -> Result<()> {
        if self.velocity[id.0].len() != v.len() {
            bail!(InvalidShape, "velocity for parameter {} has wrong length", id.0);
        }
        self.velocity[id.0] = v;
        Ok(())
    }

    /// Applies one update at learning rate `lr` to every parameter that holds
    /// a gradient, restricted to the region the gradient touched, then clears
    /// all gradients. Parameters without a gradient keep both their values
    /// and their velocity.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if self.velocity.len() != store.len() {
            bail!(InvalidShape, "optimizer tracks {} params, store has {}", self.velocity.len(), store.len());
        }
        for (p, vel) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let Some(ext) = p.touched() else { continue };
            let shape = p.value.shape().to_vec();
            let s1 = shape.get(1).copied().unwrap_or(1);
            let inner: usize = shape.iter().skip(2).product();
            let row = ext.dim1 * inner;
            let grad = p.value.grad().map(<[f32]>::to_vec).unwrap_or_default();
            if grad.len() != vel.len() {
                bail!(InvalidShape, "gradient of {} has wrong length", p.name);
            }
            let data = p.value.data_mut();
            for o in 0..ext.dim0 {
                let s = o * s1 * inner;
                sgd_update(&mut data[s..s + row], &grad[s..s + row], &mut vel[s..s + row], &self.config, lr)?;
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(momentum: f32, weight_decay: f32) -> SgdConfig {
        SgdConfig {
            learning_rate: 0.1,
            momentum,
            weight_decay,
        }
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, mut v) = ([0.0f32], [0.0f32]);
        sgd_update(&mut p, &[1.0], &mut v, &cfg(0.9, 0.0), 0.1).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-7 && (p[0] + 0.1).abs() < 1e-7);
        sgd_update(&mut p, &[1.0], &mut v, &cfg(0.9, 0.0), 0.1).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-6 && (p[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_and_pure_decay() {
        let (mut p, mut v) = ([3.0f32, -2.0], [0.0f32; 2]);
        sgd_update(&mut p, &[5.0, 5.0], &mut v, &cfg(0.9, 0.0), 0.0).unwrap();
        assert_eq!(p, [3.0, -2.0]);
        let mut v = [0.0f32; 2];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, &cfg(0.0, 0.01), 0.1).unwrap();
        assert!((p[0] - 3.0 * 0.999).abs() < 1e-6 && (p[1] + 2.0 * 0.999).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut v = [0.0f32];
        assert!(matches!(
            sgd_update(&mut [0.0, 1.0], &[1.0], &mut v, &cfg(0.9, 0.0), 0.1),
            Err(crate::Error::InvalidShape(_))
        ));
    }
}
