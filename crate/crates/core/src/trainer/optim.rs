//! Adam with bias correction, cosine-annealed learning rate and the
//! fairness-weight warm-up schedule.

use std::f64::consts::PI;

use crate::attention::ModelParams;
use crate::error::{Error, Result};

use super::TrainConfig;

/// First and second moment accumulators, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: ModelParams,
    pub second: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// `lr_min + (lr0 - lr_min)(1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config(
            "cosine schedule needs at least one step".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + phase.cos()))
}

/// Zero during warm-up, then a linear ramp that reaches `lambda_max` on the
/// final epoch.
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return 0.0;
    }
    let ramp = cfg.epochs.saturating_sub(cfg.warmup_epochs).max(1);
    let progress = (epoch - cfg.warmup_epochs + 1) as f64 / ramp as f64;
    cfg.lambda_max * progress.min(1.0)
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { param: name, index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let slots = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in slots {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
