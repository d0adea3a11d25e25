//! Learning-rate schedule: linear warmup to the peak, cosine decay to 1%
//! of the peak at the final step.

use crate::error::{Error, Result};

pub const COSINE_FLOOR_FACTOR: f64 = 0.01;

pub fn lr_schedule(step: u64, total_steps: u64, lr_init: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr_init);
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as u64;
    if warmup > 0 && step < warmup {
        return Ok(lr_init * step as f64 / warmup as f64);
    }
    let floor = lr_init * COSINE_FLOOR_FACTOR;
    let span = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    Ok(floor + (lr_init - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
