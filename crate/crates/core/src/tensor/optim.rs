use serde::{Deserialize, Serialize};

use super::{shape_err, Precision, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning-rate multiplier over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp over `warmup_steps`, then linear decay to zero at `total_steps`.
    LinearWarmupDecay { warmup_steps: u64, total_steps: u64 },
}

impl LrSchedule {
    /// Multiplier for the update applied at 0-based `step`.
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearWarmupDecay {
                warmup_steps,
                total_steps,
            } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else if total_steps <= warmup_steps {
                    1.0
                } else {
                    let left = total_steps.saturating_sub(step) as f64;
                    (left / (total_steps - warmup_steps) as f64).clamp(0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
/// `lr_factor` scales the configured learning rate (for schedules).
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr_factor: f64,
    precision: Precision,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(shape_err("adamw_step", format!("parameter {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let c = state.config;
    let lr = c.lr * lr_factor;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pv -= lr * c.weight_decay * *pv;
            *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
            *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        precision.round_slice(p.data_mut());
        precision.round_slice(m);
        precision.round_slice(v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = OptimizerState::new(cfg(0.1, 0.0), &p);
        adamw_step(&mut p, &g, &mut s, 1.0, Precision::F64).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![0.5, 0.5])];
        let g = vec![Tensor::vector(vec![3.0, -0.2])];
        let mut s = OptimizerState::new(cfg(1e-3, 0.0), &p);
        adamw_step(&mut p, &g, &mut s, 1.0, Precision::F64).unwrap();
        // mhat = g, vhat = g², so the step is lr·g/(|g|+eps)
        let d0 = 0.5 - p[0].data()[0];
        let d1 = 0.5 - p[0].data()[1];
        assert!((d0 - 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((d1 + 1e-3 * 0.2 / (0.2 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = vec![Tensor::vector(vec![2.0, -4.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = OptimizerState::new(cfg(0.1, 0.01), &p);
        adamw_step(&mut p, &g, &mut s, 1.0, Precision::F64).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert!((p[0].data()[0] - 2.0 * f).abs() < 1e-15);
        assert!((p[0].data()[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = OptimizerState::new(cfg(0.1, 0.0), &p);
        assert!(adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 1.0, Precision::F64).is_err());
    }

    #[test]
    fn schedule() {
        let s = LrSchedule::LinearWarmupDecay {
            warmup_steps: 4,
            total_steps: 12,
        };
        assert_eq!(s.factor(0), 0.25);
        assert_eq!(s.factor(3), 1.0);
        assert_eq!(s.factor(4), 1.0);
        assert_eq!(s.factor(8), 0.5);
        assert_eq!(s.factor(20), 0.0);
    }
}
