//! Adam optimizer with slot-indexed state.
//!
//! Parameters live outside the graph as plain buffers; each training step
//! rebuilds leaf tensors from them. The optimizer therefore keys its moment
//! estimates by slot position, not tensor identity: callers must pass the
//! same parameters in the same order every step.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `params[i]` and `grads[i]` must refer to the same
    /// parameter on every call; a `None` gradient leaves that slot untouched
    /// (used for frozen parameters).
    pub fn adam_step<S: Scalar>(
        &mut self,
        params: &mut [&mut [S]],
        grads: &[Option<&[S]>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.m.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "optimizer tracks {} slots, got {}",
                    self.m.len(),
                    params.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.len() != param.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "slot {}: param len {} vs grad len {}",
                        slot,
                        param.len(),
                        grad.len()
                    ),
                });
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..param.len() {
                let g = grad[i].to_f64_lossy();
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let delta = self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                let updated = param[i].to_f64_lossy() - delta;
                if !updated.is_finite() {
                    return Err(TensorError::NonFinite { op: "adam_step" });
                }
                param[i] = S::from_f64(updated);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = vec![1.0_f64, -2.0, 3.5];
        let g = vec![0.0_f64; 3];
        let mut opt = Adam::with_lr(0.1);
        opt.adam_step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, the first Adam step is lr * g/(|g| + eps').
        let mut p = vec![0.0_f64];
        let g = vec![5.0_f64];
        let mut opt = Adam::with_lr(0.1);
        opt.adam_step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn none_grad_skips_slot() {
        let mut a = vec![1.0_f64];
        let mut b = vec![1.0_f64];
        let g = vec![1.0_f64];
        let mut opt = Adam::with_lr(0.5);
        opt.adam_step(&mut [&mut a, &mut b], &[None, Some(&g)]).unwrap();
        assert_eq!(a, vec![1.0]);
        assert!(b[0] < 1.0);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (x-3)^2 by gradient 2(x-3).
        let mut x = vec![0.0_f64];
        let mut opt = Adam::with_lr(0.1);
        for _ in 0..400 {
            let g = vec![2.0 * (x[0] - 3.0)];
            opt.adam_step(&mut [&mut x], &[Some(&g)]).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "got {}", x[0]);
    }
}
