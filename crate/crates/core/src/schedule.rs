//! Noise schedule `σ(t)`, cumulative signal rate `ᾱ_t`, and the perturbation
//! ray `r_β(t)` that bounds the extra training-time perturbation.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. `σ(t)` is the per-step variance of the
//! forward transition and `ᾱ_t = ∏_{s≤t} (1 − σ(s))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigma: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Upper bound on `ᾱ_T` for a linear schedule, so that `q(x_T|x_0) ≈ N(0, I)`.
pub const MAX_FINAL_ALPHA_BAR: f64 = 0.01;

impl NoiseSchedule {
    /// Variance linearly interpolated from `sigma_min` at `t=1` to `sigma_max`
    /// at `t=T`.
    pub fn linear(steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max < 1.0) {
            return Err(Error::config(format!(
                "schedule endpoints must satisfy 0 < sigma_min < sigma_max < 1, got {sigma_min} and {sigma_max}"
            )));
        }
        let span = (steps - 1) as f64;
        let sigma = (0..steps)
            .map(|i| sigma_min + (sigma_max - sigma_min) * i as f64 / span)
            .collect();
        let schedule = Self::from_variances(sigma)?;
        let last = schedule.alpha_bar(steps);
        if last >= MAX_FINAL_ALPHA_BAR {
            return Err(Error::config(format!(
                "schedule with T={steps}, sigma in [{sigma_min}, {sigma_max}] ends at alpha_bar={last:.4}, \
                 which is not below {MAX_FINAL_ALPHA_BAR}; use more steps or a larger sigma_max"
            )));
        }
        Ok(schedule)
    }

    /// The linear schedule with endpoints `0.1/T` and `20/T`: the usual
    /// `1e-4 → 0.02` at `T=1000`, rescaled so shorter chains still reach noise.
    pub fn linear_default(steps: usize) -> Result<Self> {
        let t = steps as f64;
        Self::linear(steps, (0.1 / t).min(0.5), (20.0 / t).min(0.999))
    }

    /// Builds a schedule from explicit per-step variances `σ(1..=T)`.
    pub fn from_variances(sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        if let Some(bad) = sigma.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::OutOfRange {
                what: "sigma(t)",
                value: *bad,
                allowed: "(0, 1)".into(),
            });
        }
        let mut alpha_bar = Vec::with_capacity(sigma.len());
        let mut acc = 1.0;
        for s in &sigma {
            acc *= 1.0 - s;
            alpha_bar.push(acc);
        }
        let sigma_min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
        let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            sigma,
            alpha_bar,
            sigma_min,
            sigma_max,
        })
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as f64,
                allowed: format!("1..={}", self.steps()),
            });
        }
        Ok(())
    }

    /// Per-step variance `σ(t)`. Panics if `t` is outside `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// `α_t = 1 − σ(t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.sigma(t)
    }

    /// `ᾱ_t`, with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Shape of the perturbation ray: exponent `ω ≥ 1`, bias `γ > 0` and the
/// range `β` is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaySchedule {
    pub omega: f64,
    pub gamma: f64,
    pub beta_low: f64,
    pub beta_high: f64,
}

impl Default for RaySchedule {
    fn default() -> Self {
        Self {
            omega: 2.0,
            gamma: 8.0 / 255.0,
            beta_low: 0.5,
            beta_high: 2.0,
        }
    }
}

impl RaySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 1.0) {
            return Err(Error::config(format!("ray exponent omega must be >= 1, got {}", self.omega)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!("ray bias gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.beta_low > 0.0 && self.beta_low <= self.beta_high) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < low <= high, got [{}, {}]",
                self.beta_low, self.beta_high
            )));
        }
        Ok(())
    }

    /// `r_β(t) = ((√(1−ᾱ_t))^ω + γβ) / √(1−ᾱ_t)`.
    pub fn ray(&self, ns: &NoiseSchedule, t: usize, beta: f64) -> Result<f64> {
        ns.check_t(t)?;
        if !(beta >= self.beta_low && beta <= self.beta_high) {
            return Err(Error::OutOfRange {
                what: "beta",
                value: beta,
                allowed: format!("[{}, {}]", self.beta_low, self.beta_high),
            });
        }
        let s = (1.0 - ns.alpha_bar(t)).sqrt();
        Ok((s.powf(self.omega) + self.gamma * beta) / s)
    }

    /// Displacement bound in data space, `√(1−ᾱ_t) · r_β(t) = (√(1−ᾱ_t))^ω + γβ`.
    pub fn effective_ray(&self, ns: &NoiseSchedule, t: usize, beta: f64) -> Result<f64> {
        let s = (1.0 - ns.alpha_bar(t)).sqrt();
        Ok(s * self.ray(ns, t, beta)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_ddpm_schedule_reaches_noise() {
        let ns = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Direct product, computed independently in log space.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let expected = log_sum.exp();
        assert!((ns.alpha_bar(1000) - expected).abs() < 1e-12);
        assert!((ns.alpha_bar(1000) - 4.0e-5).abs() < 0.1e-5, "{}", ns.alpha_bar(1000));
        assert!(ns.alpha_bar(1000) < MAX_FINAL_ALPHA_BAR);
    }

    #[test]
    fn two_step_constant_schedule() {
        let c = 0.3;
        let ns = NoiseSchedule::from_variances(vec![c, c]).unwrap();
        assert!((ns.alpha_bar(2) - (1.0 - c) * (1.0 - c)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(NoiseSchedule::linear(100, 1e-3, 1.0).is_err());
        assert!(NoiseSchedule::linear(100, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(100, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        // Too short to reach noise.
        assert!(NoiseSchedule::linear(100, 1e-4, 0.02).is_err());
    }

    #[test]
    fn default_for_short_chains_reaches_noise() {
        for steps in [10, 50, 100, 1000] {
            let ns = NoiseSchedule::linear_default(steps).unwrap();
            assert!(ns.alpha_bar(steps) < MAX_FINAL_ALPHA_BAR);
        }
    }

    #[test]
    fn omega_one_collapses_first_term() {
        let ns = NoiseSchedule::linear_default(100).unwrap();
        let rs = RaySchedule {
            omega: 1.0,
            ..RaySchedule::default()
        };
        for t in [1, 10, 50, 100] {
            let s = (1.0 - ns.alpha_bar(t)).sqrt();
            let r = rs.ray(&ns, t, 1.3).unwrap();
            assert!((r - (1.0 + rs.gamma * 1.3 / s)).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_ray_near_pure_noise() {
        // At alpha_bar → 0 the effective ray tends to 1 + γβ.
        let ns = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let rs = RaySchedule::default();
        let eff = rs.effective_ray(&ns, 1000, 1.0).unwrap();
        assert!((eff - (1.0 + 8.0 / 255.0)).abs() < 1e-4, "{eff}");
        assert!((eff - 1.031).abs() < 1e-3);
    }

    #[test]
    fn ray_rejects_out_of_range() {
        let ns = NoiseSchedule::linear_default(10).unwrap();
        let rs = RaySchedule::default();
        assert!(rs.ray(&ns, 0, 1.0).is_err());
        assert!(rs.ray(&ns, 11, 1.0).is_err());
        assert!(rs.ray(&ns, 5, 3.0).is_err());
    }
}
