use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Variance schedule of the forward noising chain.
///
/// Timesteps are 1-based: step `t` maps `x_{t-1}` to
/// `x_t = a_t·x_{t-1} + b_t·ε` with `a_t = √(1−β_t)` and `b_t = √β_t`.
/// `alpha_bar(0) == 1` so `t = 0` denotes the clean sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "schedule requires 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("betas must be nondecreasing"));
        }
        let a = beta.iter().map(|b| (1.0 - b).sqrt()).collect();
        let b = beta.iter().map(|b| b.sqrt()).collect();
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, a, b, alpha_bar })
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn a(&self, t: usize) -> f64 {
        self.a[t - 1]
    }

    pub fn b(&self, t: usize) -> f64 {
        self.b[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bar.last().expect("non-empty schedule")
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    fn check_marginal(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// One forward step: `a_t·x + b_t·noise`.
    pub fn forward_step(&self, x: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        let (a, b) = (self.a(t) as f32, self.b(t) as f32);
        Ok(x.zip_map(noise, |x, n| a * x + b * n)?)
    }

    /// Closed-form `q(x_t | x_0)` sample: `√ᾱ_t·x_0 + √(1−ᾱ_t)·noise`.
    pub fn forward_marginal(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_marginal(t)?;
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        Ok(x0.zip_map(noise, |x, e| s * x + n * e)?)
    }

    /// [`NoiseSchedule::forward_marginal`] on a graph node.
    pub fn marginal_in_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        x0: Var,
        t: usize,
        noise: &Tensor,
    ) -> Result<Var> {
        self.check_marginal(t)?;
        let ab = self.alpha_bar(t);
        if t == 0 {
            return Ok(x0);
        }
        let signal = g.scale(x0, ab.sqrt())?;
        let n = g.constant(noise.cast::<T>());
        let n = g.scale(n, (1.0 - ab).sqrt())?;
        Ok(g.add(signal, n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn thousand_step_standard_schedule_reaches_noise() {
        // Independent evaluation: Σ log(1 − β_t) with β linear in [1e-4, 0.02].
        let log_ab: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!(log_ab.exp() < 5e-5);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.terminal_alpha_bar() < 5e-5);
        assert!((s.terminal_alpha_bar() - log_ab.exp()).abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid_betas() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn variance_preserving_and_monotone() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        for t in 1..=100 {
            assert!((s.a(t).powi(2) + s.b(t).powi(2) - 1.0).abs() < 1e-12);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.terminal_alpha_bar() < 0.05);
    }

    #[test]
    fn zero_noise_scales_input() {
        let s = NoiseSchedule::linear(10, 0.01, 0.3).unwrap();
        let x = Tensor::from_fn(&[5], |i| i as f32 - 2.0);
        let z = Tensor::zeros(&[5]);
        let a = s.a(4) as f32;
        assert_eq!(s.forward_step(&x, 4, &z).unwrap(), x.map(|v| a * v));
        let sa = s.alpha_bar(7).sqrt() as f32;
        assert_eq!(s.forward_marginal(&x, 7, &z).unwrap(), x.map(|v| sa * v));
    }

    #[test]
    fn out_of_range_timesteps() {
        let s = NoiseSchedule::linear(10, 0.01, 0.3).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(s.forward_step(&x, 0, &x).is_err());
        assert!(s.forward_step(&x, 11, &x).is_err());
        assert!(s.forward_marginal(&x, 11, &x).is_err());
        assert_eq!(s.forward_marginal(&x, 0, &x).unwrap(), x);
    }

    #[test]
    fn terminal_marginal_is_mostly_noise() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let mut rng = Rng::new(3);
        let x0 = rng.uniform_tensor(&[256], 0.0, 1.0);
        let noise = rng.normal_tensor(&[256]);
        let out = s.forward_marginal(&x0, 100, &noise).unwrap();
        let diff: f32 = out.data().iter().zip(noise.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f32 = noise.data().iter().map(|v| v * v).sum();
        assert!((diff / norm).sqrt() < 0.05);
    }
}
