//! Adam with bias correction and the warm-up/step-decay learning-rate
//! schedule.

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Warm-up ramps linearly from `WARMUP_START_FACTOR * base_lr` to `base_lr`.
pub const WARMUP_START_FACTOR: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    /// One moment pair per parameter, in a fixed order the caller maintains.
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// In-place update of every parameter from its gradient. `names` is used
    /// only for error reporting on non-finite gradients.
    pub fn step(
        &mut self,
        params: &mut [Vec<f64>],
        grads: &[Vec<f64>],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} for parameter '{}' at step {}",
                    names.get(i).map(String::as_str).unwrap_or("?"),
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..params.len() {
            let (p, g) = (&mut params[i], &grads[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for e in 0..p.len() {
                m[e] = ADAM_BETA1 * m[e] + (1.0 - ADAM_BETA1) * g[e];
                v[e] = ADAM_BETA2 * v[e] + (1.0 - ADAM_BETA2) * g[e] * g[e];
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                p[e] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Piecewise learning rate: a linear warm-up to `base_lr`, then absolute
/// step decays applied from their epoch onward (right-continuous).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// (epoch, new_lr) pairs, sorted by epoch.
    pub decay: Vec<(usize, f64)>,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.warmup_epochs >= self.total_epochs && self.total_epochs > 0 {
            return Err(Error::Config(format!(
                "warmup ({}) must end before total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let mut prev = self.warmup_epochs;
        for &(epoch, lr) in &self.decay {
            if lr <= 0.0 {
                return Err(Error::Config(format!("decay lr must be > 0, got {lr}")));
            }
            if epoch < prev {
                return Err(Error::Config(
                    "decay points must be sorted and after the warm-up".into(),
                ));
            }
            if epoch >= self.total_epochs {
                return Err(Error::Config(format!(
                    "decay epoch {epoch} beyond total epochs {}",
                    self.total_epochs
                )));
            }
            prev = epoch;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            let frac = epoch as f64 / self.warmup_epochs as f64;
            return Ok(self.base_lr * (WARMUP_START_FACTOR + (1.0 - WARMUP_START_FACTOR) * frac));
        }
        let mut lr = self.base_lr;
        for &(e, decayed) in &self.decay {
            if epoch >= e {
                lr = decayed;
            }
        }
        Ok(lr)
    }
}
