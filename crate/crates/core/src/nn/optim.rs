//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use super::model::ModelState;
use crate::error::{shape_err, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear warmup to `base_lr`, then cosine decay towards zero.
///
/// Epoch `e < warmup` gets `base_lr * (e + 1) / warmup`; epoch `e >= warmup`
/// gets `base_lr * (1 + cos(pi * (e - warmup) / (total - warmup))) / 2`.
pub fn lr_at(epoch: usize, base_lr: f64, warmup: usize, total: usize) -> Result<f64> {
    if warmup >= total {
        return Err(Error::Argument(format!("warmup {warmup} must be below total {total}")));
    }
    if epoch >= total {
        return Err(Error::Argument(format!("epoch {epoch} outside [0, {total})")));
    }
    if epoch < warmup {
        return Ok(base_lr * (epoch + 1) as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * (1.0 + (PI * progress).cos()) / 2.0)
}

impl ModelState {
    /// One AdamW update: `p -= lr * wd * p`, then the bias-corrected
    /// adaptive step.
    pub fn opt_step(&mut self, grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(shape_err(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let opt = &mut self.opt;
        opt.step += 1;
        let bc1 = 1.0 - BETA1.powf(opt.step as f64);
        let bc2 = 1.0 - BETA2.powf(opt.step as f64);
        for (((p, &g), m), v) in self.params.iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
            *p -= lr * weight_decay * *p;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
        Ok(())
    }
}
