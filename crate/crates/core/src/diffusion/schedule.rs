//! Noise schedule and forward process.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// Variance schedule with timesteps numbered 1..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    /// β evenly spaced from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion.steps must be positive".into()));
        }
        if !(0.0 < start && start < 1.0 && 0.0 < end && end < 1.0) || (steps > 1 && start >= end) {
            return Err(Error::Config(format!(
                "diffusion.beta_start ({start}) and diffusion.beta_end ({end}) must satisfy 0 < start < end < 1"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    /// ᾱ_t; ᾱ_0 is 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// `steps` timesteps spread evenly over 1..=T, in decreasing order.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!("sampler steps {steps} outside 1..={total}")));
        }
        Ok((1..=steps).rev().map(|i| (i * total).div_ceil(steps)).collect())
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for an explicit ᾱ in [0, 1].
pub fn q_sample_alpha_bar(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_broadcast(eps, "q_sample", |x, e| a * x + b * e)
}

pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    q_sample_alpha_bar(x0, schedule.alpha_bar(t)?, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_invariants() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 2e-2).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.beta(t).unwrap() > s.beta(t - 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
        assert!(s.beta(0).is_err() && s.beta(1001).is_err());
    }

    #[test]
    fn synthetic_extremes() {
        let x0 = Tensor::new([2, 2], vec![0.1, -0.3, 0.7, 1.0]).unwrap();
        let eps = Tensor::new([2, 2], vec![1.5, 0.2, -2.0, 0.0]).unwrap();
        assert_eq!(q_sample_alpha_bar(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(q_sample_alpha_bar(&x0, 0.0, &eps).unwrap(), eps);
    }

    #[test]
    fn strided_timesteps() {
        let s = DiffusionSchedule::default();
        let ts = s.strided(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.strided(1000).unwrap()[999], 1);
        assert!(s.strided(1001).is_err() && s.strided(0).is_err());
    }

    #[test]
    fn inverted_betas_rejected() {
        let err = DiffusionSchedule::linear(10, 0.5, 0.1).unwrap_err().to_string();
        assert!(err.contains("beta_start") && err.contains("beta_end"), "{err}");
    }
}
