//! Adam with bias correction, and the cosine learning-rate schedule.

use crate::error::{Result, ScplError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers mirroring one parameter list, plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a parameter list. `grads[i]` must be present and the
    /// same length as `params[i]`; names are used for error reporting only.
    pub fn step<'a>(
        &mut self,
        params: Vec<&mut Vec<f64>>,
        grads: &[Option<&'a [f64]>],
        names: impl Fn(usize) -> String,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(ScplError::InvalidParam(format!(
                "adam state holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (idx, (param, grad)) in params.into_iter().zip(grads).enumerate() {
            let g = grad.ok_or_else(|| ScplError::MissingGradient { name: names(idx) })?;
            debug_assert_eq!(g.len(), param.len());
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..param.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// lr(t) = lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(total >= 1 && epoch <= total);
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

/// Learning rate for epoch `t` of `total` under the configured schedule.
pub fn schedule_lr(schedule: LrSchedule, epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    match schedule {
        LrSchedule::Constant => lr_max,
        LrSchedule::Cosine => cosine_lr(epoch, total, lr_max, lr_min),
    }
}
