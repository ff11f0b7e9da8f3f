use std::f64::consts::PI;

use super::{ParamSet, Tensor, TensorError};

/// Linear warm-up followed by cosine decay to a floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn warmup_cosine(base_lr: f64, min_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            min_lr,
            warmup_frac: 0.10,
            total_steps,
        }
    }

    /// Fixed learning rate for `total_steps` steps.
    pub fn constant(lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr: lr,
            min_lr: lr,
            warmup_frac: 0.0,
            total_steps,
        }
    }

    /// Effective learning rate for zero-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = self.warmup_frac * total;
        let t = t as f64;
        if t < warm {
            return self.base_lr * t / warm;
        }
        let span = (total - warm).max(1.0);
        let progress = ((t - warm) / span).clamp(0.0, 1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments, step counter and schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig, schedule: LrSchedule) -> Self {
        let zeros = |p: &ParamSet| (0..p.len()).map(|i| Tensor::zeros(p.get(i).shape())).collect();
        Self {
            config,
            schedule,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One AdamW update with bias correction and decoupled weight decay.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor<f32>]) -> Result<(), TensorError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Shape {
                op: "optimizer_step",
                detail: format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        if self.step >= self.schedule.total_steps {
            return Err(TensorError::ScheduleExhausted {
                total: self.schedule.total_steps,
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() {
                return Err(TensorError::Shape {
                    op: "optimizer_step",
                    detail: format!(
                        "{}: gradient {:?} vs parameter {:?}",
                        params.name(i),
                        g.shape(),
                        params.get(i).shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite {
                    name: params.name(i).to_string(),
                });
            }
        }
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let (one_b1, one_b2) = ((1.0 - c.beta1) as f32, (1.0 - c.beta2) as f32);
        let step_size = (lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.get_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                w[j] = w[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(&[1], vec![w]).unwrap());
        p
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = single(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, cfg, LrSchedule::constant(0.1, 10));
        opt.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        assert!((p.get(0).item() - 0.999).abs() < 1e-7);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut p = single(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, cfg, LrSchedule::constant(0.1, 10));
        opt.step(&mut p, &[Tensor::ones(&[1])]).unwrap();
        // m̂ = v̂ = 1  ⇒  Δw = -0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get(0).item() as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn warmup_midpoint_is_half_base() {
        let s = LrSchedule::warmup_cosine(1e-3, 1e-5, 1000);
        assert!((s.lr_at(50) - 0.5e-3).abs() < 1e-15);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(100) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(1000) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn cosine_decay_is_monotone_after_warmup() {
        let s = LrSchedule::warmup_cosine(1e-3, 1e-5, 500);
        let lrs: Vec<f64> = (50..=500).map(|t| s.lr_at(t)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = single(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&p, cfg, LrSchedule::warmup_cosine(1e-3, 1e-5, 20));
        for _ in 0..20 {
            opt.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        }
        assert_eq!(p.get(0).item(), 0.37);
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let mut p = single(0.0);
        let mut opt = OptimizerState::new(&p, AdamWConfig::default(), LrSchedule::constant(0.1, 10));
        let err = opt.step(&mut p, &[Tensor::new(&[1], vec![f32::NAN]).unwrap()]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { ref name } if name == "w"));
    }

    #[test]
    fn rejects_shape_mismatch_and_exhausted_schedule() {
        let mut p = single(0.0);
        let mut opt = OptimizerState::new(&p, AdamWConfig::default(), LrSchedule::constant(0.1, 1));
        assert!(matches!(
            opt.step(&mut p, &[Tensor::zeros(&[2])]),
            Err(TensorError::Shape { .. })
        ));
        opt.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        assert!(matches!(
            opt.step(&mut p, &[Tensor::zeros(&[1])]),
            Err(TensorError::ScheduleExhausted { .. })
        ));
    }
}
