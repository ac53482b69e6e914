//! Adam optimizer with warm-up and stepped exponential decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Learning-rate schedule: linear warm-up, then a constant factor applied
/// every `decay_interval` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl LrSchedule {
    /// Effective rate at 1-based `step`:
    /// `base * min(step/warmup, 1) * decay_factor^(step / decay_interval)`
    /// with integer division in the decay exponent.
    pub fn rate_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.decay_interval == 0 {
            1.0
        } else {
            self.decay_factor.powi((step / self.decay_interval) as i32)
        };
        self.base * warm * decay
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    schedule: LrSchedule,
}

impl AdamState {
    pub fn new(param_sizes: &[usize], schedule: LrSchedule) -> Self {
        AdamState {
            step: 0,
            first_moment: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second_moment: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            schedule,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// Rate the next `adam_step` call will apply.
    pub fn next_rate(&self) -> f64 {
        self.schedule.rate_at(self.step + 1)
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuilds state from checkpointed moments.
    pub fn from_parts(
        step: u64,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
        schedule: LrSchedule,
    ) -> Self {
        AdamState {
            step,
            first_moment,
            second_moment,
            schedule,
        }
    }
}

/// One Adam update over a parameter list; `grads[i]` pairs with `params[i]`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: format!("{} params", params.len()),
            rhs: format!("{} grads, {} moments", grads.len(), state.first_moment.len()),
        });
    }
    state.step += 1;
    let t = state.step;
    let lr = state.schedule.rate_at(t);
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(&mut state.second_moment))
    {
        if param.len() != grad.len() || param.len() != m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: format!("param of {}", param.len()),
                rhs: format!("grad of {}, moment of {}", grad.len(), m.len()),
            });
        }
        for (i, g) in grad.iter().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}
