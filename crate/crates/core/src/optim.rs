//! Learning-rate schedule and SGD with momentum.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Linear warmup followed by step decay.
///
/// The rate rises linearly from `base_lr` to `base_lr * warmup_factor` over
/// `[0, warmup_epochs)`, then drops by `decay_factor` at every decay epoch.
/// The first drop takes effect at its epoch; later drops take effect just
/// after theirs, so with the defaults epoch 50 runs at 1e-3, epoch 70 still
/// at 1e-3 and epoch 70.5 at 1e-4.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub warmup_factor: f64,
    pub decay_epochs: Vec<f64>,
    pub decay_factor: f64,
    pub final_epoch: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 5.0,
            warmup_factor: 10.0,
            decay_epochs: alloc::vec![50.0, 70.0],
            decay_factor: 0.1,
            final_epoch: 90.0,
        }
    }
}

impl ScheduleSpec {
    /// Same shape with every epoch boundary multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            warmup_epochs: self.warmup_epochs * factor,
            decay_epochs: self.decay_epochs.iter().map(|e| e * factor).collect(),
            final_epoch: self.final_epoch * factor,
            ..self.clone()
        }
    }

    /// The default schedule compressed to `epochs` total epochs.
    pub fn desk(epochs: usize) -> Self {
        let d = Self::default();
        d.scaled(epochs as f64 / d.final_epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.base_lr) || !positive(self.warmup_factor) || !positive(self.decay_factor) {
            return Err(Error::Config(
                "learning rate, warmup factor and decay factor must be positive".into(),
            ));
        }
        if !(self.warmup_epochs >= 0.0) || !positive(self.final_epoch) {
            return Err(Error::Config("schedule epochs must be non-negative".into()));
        }
        let mut prev = self.warmup_epochs;
        for &d in &self.decay_epochs {
            if !(d >= prev) || d > self.final_epoch {
                return Err(Error::Config(
                    "decay epochs must be ascending, after warmup and before the final epoch"
                        .into(),
                ));
            }
            prev = d;
        }
        Ok(())
    }

    /// Learning rate at a (fractional) epoch in `[0, final_epoch]`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(epoch >= 0.0 && epoch <= self.final_epoch) {
            return Err(Error::Schedule {
                epoch,
                max: self.final_epoch,
            });
        }
        let peak = self.base_lr * self.warmup_factor;
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr + (peak - self.base_lr) * epoch / self.warmup_epochs);
        }
        let drops = self
            .decay_epochs
            .iter()
            .enumerate()
            .filter(|&(i, &d)| if i == 0 { epoch >= d } else { epoch > d })
            .count();
        Ok(peak * libm::pow(self.decay_factor, drops as f64))
    }
}

/// Free function form of [`ScheduleSpec::lr_at`].
pub fn lr_at(schedule: &ScheduleSpec, epoch: f64) -> Result<f64> {
    schedule.lr_at(epoch)
}

/// How the scheduled rate relates to the number of devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScaling {
    /// The schedule is the global rate regardless of device count.
    Global,
    /// The schedule is per device; the applied rate is multiplied by the
    /// device count.
    PerDevice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_per_device: usize,
    pub devices: usize,
    pub lr_scaling: LrScaling,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_per_device: 8,
            devices: 1,
            lr_scaling: LrScaling::Global,
        }
    }
}

impl OptimizerSpec {
    pub fn effective_batch(&self) -> usize {
        self.batch_per_device * self.devices
    }

    pub fn applied_lr(&self, scheduled: f64) -> f64 {
        match self.lr_scaling {
            LrScaling::Global => scheduled,
            LrScaling::PerDevice => scheduled * self.devices as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_per_device == 0 || self.devices == 0 {
            return Err(Error::Config("batch size and device count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1), weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v = μ v + (g + λ w)`, `w -= lr v`. Normalization scales and shifts are
/// not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Restores momentum buffers (e.g. from a checkpoint).
    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("momentum buffers do not match the parameters".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.velocity) {
            let wd = if p.kind.is_norm() { 0.0 } else { self.weight_decay };
            let w = p.value.data_mut();
            for ((wi, gi), vi) in w.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}
