use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoMode {
    /// Constant step size `rho_fixed`.
    #[default]
    Fixed,
    /// `ρ_t = (1 − α_t) / (√α_t · σ_z²)`.
    Schedule,
}

/// Settings of the reverse-diffusion sampler and its measurement guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub rho_mode: RhoMode,
    pub rho_fixed: f64,
    pub sigma_z: f64,
    /// Jump size Δt between visited steps; the last jump may be shorter.
    pub stride: usize,
    /// Number of denoiser evaluations; when set it must equal `⌈T / stride⌉`.
    pub steps_used: Option<usize>,
    pub em_iters: usize,
    /// Overwrite observed entries of the state with forward-noised measurements.
    pub replacement: bool,
    pub seed: u64,
    /// Windows evaluated together in one denoiser call.
    pub batch_size: usize,
    /// Worker threads; results do not depend on this.
    pub jobs: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            rho_mode: RhoMode::Fixed,
            rho_fixed: 0.05,
            sigma_z: 0.0,
            stride: 1,
            steps_used: None,
            em_iters: 20,
            replacement: true,
            seed: 0,
            batch_size: 16,
            jobs: 1,
        }
    }
}

impl GuidanceConfig {
    /// Guidance switched off: plain ancestral sampling.
    pub fn unguided() -> Self {
        Self {
            rho_fixed: 0.0,
            em_iters: 0,
            replacement: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let t = schedule.steps();
        if self.stride == 0 || self.stride > t {
            return Err(Error::validation(format!("stride {} must lie in 1..={t}", self.stride)));
        }
        if !(self.rho_fixed >= 0.0 && self.rho_fixed.is_finite()) {
            return Err(Error::validation(format!("rho_fixed = {} must be finite and >= 0", self.rho_fixed)));
        }
        if self.rho_mode == RhoMode::Schedule && !(self.sigma_z > 0.0 && self.sigma_z.is_finite()) {
            return Err(Error::validation("the scheduled step size needs sigma_z > 0"));
        }
        if let Some(s) = self.steps_used {
            let expected = t.div_ceil(self.stride);
            if s != expected {
                return Err(Error::validation(format!(
                    "steps_used = {s} is inconsistent with T = {t} and stride {} (expected {expected})",
                    self.stride
                )));
            }
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return Err(Error::validation("batch_size and jobs must be positive"));
        }
        Ok(())
    }

    /// Visited steps `T, T − Δt, …` down to (but excluding) 0.
    pub fn trajectory(&self, schedule: &NoiseSchedule) -> Vec<usize> {
        (1..=schedule.steps()).rev().step_by(self.stride).collect()
    }

    /// Step size at step `t` when jumping by `dt`.
    pub fn rho(&self, t: usize, dt: usize, schedule: &NoiseSchedule) -> f64 {
        match self.rho_mode {
            RhoMode::Fixed => self.rho_fixed,
            RhoMode::Schedule => {
                let a = schedule.alpha_bar(t) / schedule.alpha_bar(t - dt);
                (1.0 - a) / (a.sqrt() * self.sigma_z * self.sigma_z)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_covers_schedule() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let mut c = GuidanceConfig {
            stride: 3,
            ..GuidanceConfig::default()
        };
        assert_eq!(c.trajectory(&s), vec![10, 7, 4, 1]);
        c.steps_used = Some(4);
        assert!(c.validate(&s).is_ok());
        c.steps_used = Some(3);
        assert!(c.validate(&s).is_err());
        c.stride = 10;
        c.steps_used = None;
        assert_eq!(c.trajectory(&s), vec![10]);
        c.stride = 1;
        assert_eq!(c.trajectory(&s).len(), 10);
    }

    #[test]
    fn schedule_mode_needs_noise_level() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let mut c = GuidanceConfig {
            rho_mode: RhoMode::Schedule,
            ..GuidanceConfig::default()
        };
        assert!(c.validate(&s).is_err());
        c.sigma_z = 0.1;
        assert!(c.validate(&s).is_ok());
        let expected = (1.0 - s.alpha(5)) / (s.alpha(5).sqrt() * 0.01);
        assert!((c.rho(5, 1, &s) - expected).abs() < 1e-12 * expected);
    }
}
