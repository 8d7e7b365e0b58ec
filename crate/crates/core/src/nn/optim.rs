//! RAdam optimizer and stochastic weight averaging.
//!
//! RAdam follows the published recurrence: exponential moments with
//! bias correction, and a variance-rectification factor applied only
//! once the rectification term rho_t exceeds 4; before that the update
//! falls back to plain (bias-corrected) momentum.

use crate::error::{Error, Result};
use crate::nn::tensor::TensorSet;

#[derive(Debug, Clone, Copy)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RAdam {
    pub cfg: RAdamConfig,
    m: TensorSet,
    v: TensorSet,
    step: u64,
}

impl RAdam {
    pub fn new(params: &TensorSet, cfg: RAdamConfig) -> Self {
        Self {
            cfg,
            m: TensorSet::zeros_like(params),
            v: TensorSet::zeros_like(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the whole parameter family. Errors out on any
    /// non-finite gradient so a diverged run aborts loudly.
    pub fn step(&mut self, params: &mut TensorSet, grads: &TensorSet) -> Result<()> {
        if params.tensors.len() != grads.tensors.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} tensors", params.tensors.len()),
                got: format!("{}", grads.tensors.len()),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let b1t = b1.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rectified = rho_t > 4.0;
        let r_t = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        } else {
            0.0
        };

        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g.data()[i];
                if !gi.is_finite() {
                    return Err(Error::Model(format!(
                        "non-finite gradient at step {}",
                        self.step
                    )));
                }
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / (1.0 - b1t);
                let delta = if rectified {
                    let l = (1.0 - b2t).sqrt() / (vi.sqrt() + self.cfg.eps);
                    self.cfg.lr * r_t * l * m_hat
                } else {
                    self.cfg.lr * m_hat
                };
                p.data_mut()[i] -= delta;
            }
        }
        Ok(())
    }
}

/// Equal-weight running average of end-of-epoch parameters, active from
/// `swa_start` onward. The averaged weights become the final model.
#[derive(Debug, Clone)]
pub struct SwaAccumulator {
    pub swa_start: u64,
    sum: Option<TensorSet>,
    count: u64,
}

impl SwaAccumulator {
    pub fn new(swa_start: u64) -> Self {
        Self {
            swa_start,
            sum: None,
            count: 0,
        }
    }

    pub fn snapshot_count(&self) -> u64 {
        self.count
    }

    /// Feed the end-of-epoch parameters; epochs before `swa_start` are
    /// ignored.
    pub fn update(&mut self, params: &TensorSet, epoch: u64) {
        if epoch < self.swa_start {
            return;
        }
        match &mut self.sum {
            None => {
                self.sum = Some(params.clone());
                self.count = 1;
            }
            Some(sum) => {
                sum.axpy(1.0, params);
                self.count += 1;
            }
        }
    }

    /// Arithmetic mean of the accumulated snapshots, if any.
    pub fn mean(&self) -> Option<TensorSet> {
        let sum = self.sum.as_ref()?;
        let mut out = sum.clone();
        let n = self.count as f64;
        for t in &mut out.tensors {
            for v in t.data_mut() {
                *v /= n;
            }
        }
        Some(out)
    }
}
