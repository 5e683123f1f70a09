//! Stochastic gradient descent with momentum and a multi-step learning-rate
//! schedule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    /// `(epoch, multiplier)` pairs; from `epoch` on the rate is multiplied by
    /// `multiplier` (cumulatively with earlier entries).
    pub lr_schedule: Vec<(usize, f32)>,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    32
}

impl Default for SgdConfig {
    /// Fine-tuning protocol used for quantization-aware training: 15 epochs
    /// from 0.001, decayed by 0.1 at epochs 5 and 10.
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            momentum: 0.9,
            epochs: 15,
            lr_schedule: vec![(5, 0.1), (10, 0.1)],
            seed: 0,
            batch_size: default_batch_size(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr_schedule epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    /// `base_lr` times every schedule multiplier whose epoch is `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.base_lr, |lr, (_, m)| lr * m)
    }
}

/// Momentum buffers for a fixed list of parameter slots.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// `w <- w - lr(epoch) * v` with `v <- momentum * v + g`.
    pub fn step(&mut self, slot: usize, param: &mut [f32], grad: &[f32], epoch: usize) {
        self.step_scaled(slot, param, grad, epoch, None);
    }

    /// As [`Sgd::step`] but with a per-element learning-rate multiplier.
    pub fn step_scaled(
        &mut self,
        slot: usize,
        param: &mut [f32],
        grad: &[f32],
        epoch: usize,
        lr_scale: Option<&[f32]>,
    ) {
        debug_assert_eq!(param.len(), grad.len());
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != param.len() {
            *v = vec![0.0; param.len()];
        }
        let lr = self.config.lr_at(epoch);
        let mu = self.config.momentum;
        for (i, ((w, g), vi)) in param.iter_mut().zip(grad).zip(v.iter_mut()).enumerate() {
            *vi = mu * *vi + g;
            let scale = lr_scale.map_or(1.0, |s| s[i]);
            *w -= lr * scale * *vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f32) -> SgdConfig {
        SgdConfig {
            base_lr: lr,
            momentum: 0.0,
            epochs: 1,
            lr_schedule: vec![],
            seed: 0,
            batch_size: 1,
        }
    }

    #[test]
    fn step_decay_schedule() {
        let c = SgdConfig {
            lr_schedule: vec![(5, 0.1)],
            ..SgdConfig::default()
        };
        assert_eq!(c.lr_at(4), 0.001);
        assert!((c.lr_at(5) - 0.0001).abs() < 1e-9);
        let d = SgdConfig::default();
        assert_eq!(d.epochs, 15);
        assert!((d.lr_at(10) - 1e-5).abs() < 1e-10);
        assert!((d.lr_at(14) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn plain_step_and_zero_grad() {
        let mut sgd = Sgd::new(cfg(0.1));
        let mut w = [1.0f32];
        sgd.step(0, &mut w, &[2.0], 0);
        assert!((w[0] - 0.8).abs() < 1e-7);
        let mut z = [0.3f32, -0.7];
        sgd.step(1, &mut z, &[0.0, 0.0], 0);
        assert_eq!(z, [0.3, -0.7]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut sgd = Sgd::new(SgdConfig {
            momentum: 0.5,
            ..cfg(1.0)
        });
        let mut w = [0.0f32];
        sgd.step(0, &mut w, &[1.0], 0);
        sgd.step(0, &mut w, &[1.0], 0);
        assert_eq!(w[0], -2.5);
    }

    #[test]
    fn validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = SgdConfig {
            lr_schedule: vec![(5, 0.1), (5, 0.1)],
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..SgdConfig::default() }.validate().is_err());
    }
}
