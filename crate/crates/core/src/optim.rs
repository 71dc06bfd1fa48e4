//! Adam with bias correction and epoch-indexed learning-rate schedules.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Learning rate as a function of the (0-based) epoch index.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `period` epochs.
    Step { factor: f64, period: usize },
    /// Multiply by `factor` at each listed epoch.
    Milestones { factor: f64, at: Vec<usize> },
}

impl LrSchedule {
    pub fn lr_at(&self, initial: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => initial,
            LrSchedule::Step { factor, period } => {
                initial * factor.powi((epoch / (*period).max(1)) as i32)
            }
            LrSchedule::Milestones { factor, at } => {
                initial * factor.powi(at.iter().filter(|&&m| m <= epoch).count() as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    /// Default moments (0.9, 0.999, 1e-8) with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule: LrSchedule::Constant }
    }

    pub fn schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
    lr: f64,
}

impl<T: Scalar> AdamState<T> {
    /// State for parameter tensors of the given lengths.
    pub fn new(lengths: &[usize], config: AdamConfig) -> Self {
        Self {
            first: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
            lr: config.lr,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies the schedule for `epoch`.
    pub fn start_epoch(&mut self, epoch: usize) {
        self.lr = self.config.schedule.lr_at(self.config.lr, epoch);
    }

    /// One Adam update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params / {} grads for {} states", params.len(), grads.len(), self.first.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::shape("adam_step", format!("parameter {i} length mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::<f32>::new(&[3], AdamConfig::with_lr(0.1));
        let mut p = vec![1.0f32, -2.0, 3.0];
        for _ in 0..5 {
            s.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2 after one step, so the update is lr * g/(|g| + eps).
        let mut s = AdamState::<f64>::new(&[1], AdamConfig::with_lr(0.1));
        let mut p = vec![0.0];
        s.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut s = AdamState::<f32>::new(&[2], AdamConfig::with_lr(0.1));
        let mut p = vec![1.0f32, 1.0];
        let err = s.step(&mut [&mut p], &[&[0.5, f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(0)));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = AdamState::<f32>::new(&[4], AdamConfig::with_lr(0.01));
            let mut p = vec![0.3f32, -0.1, 0.7, 2.0];
            for k in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| x * 2.0 - k as f32 * 0.01).collect();
                s.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedules() {
        let step = LrSchedule::Step { factor: 0.3, period: 5 };
        assert_eq!(step.lr_at(1e-3, 4), 1e-3);
        assert!((step.lr_at(1e-3, 5) - 3e-4).abs() < 1e-18);
        let ms = LrSchedule::Milestones { factor: 0.1, at: vec![4, 8] };
        assert_eq!(ms.lr_at(0.1, 3), 0.1);
        assert!((ms.lr_at(0.1, 4) - 0.01).abs() < 1e-15);
        assert!((ms.lr_at(0.1, 9) - 0.001).abs() < 1e-15);
    }
}
