use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset keeping `β_1` away from zero in the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    /// Loaded from a file; provenance unknown.
    Custom,
}

/// Per-step variances for `T` diffusion steps.
///
/// All vectors have length `T + 1` and are indexed by step: index 0 is clean
/// data (`ᾱ_0 = 1`, `β_0 = 0`), indices `1..=T` are noisy states.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ(t) = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`,
    /// `β_t = 1 − ᾱ(t)/ᾱ(t−1)` capped at 0.999, and `ᾱ` recomputed as the running
    /// product of `1 − β` so that it is exactly consistent with the stored betas.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::validation(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let f = |t: usize| {
            let phase = ((t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let mut beta = vec![0.0; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            let ratio = (f(t) / f0) / (f(t - 1) / f0);
            *b = (1.0 - ratio).clamp(0.0, MAX_BETA);
        }
        Self::from_betas_kind(beta, ScheduleKind::Cosine)
    }

    /// Builds a schedule from `β_1..β_T` (index 0 must be 0).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        Self::from_betas_kind(beta, ScheduleKind::Custom)
    }

    fn from_betas_kind(beta: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if beta.len() < 3 || beta[0] != 0.0 {
            return Err(Error::validation("betas must be indexed 0..=T with β_0 = 0 and T >= 2"));
        }
        if let Some((t, b)) = beta.iter().enumerate().skip(1).find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::validation(format!("β_{t} = {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
                }
            })
            .collect();
        Ok(Self {
            kind,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noisy steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`; zero at `t = 0` and `t = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::validation(format!("step {t} outside {lo}..={}", self.steps())));
        }
        Ok(())
    }

    /// CSV with header `t,beta,alpha,alpha_bar`, one row per step `1..=T`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for t in 1..=self.steps() {
            out.push_str(&format!("{t},{},{},{}\n", self.beta[t], self.alpha[t], self.alpha_bar[t]));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a schedule written by [`write_csv`](Self::write_csv). Betas are
    /// authoritative; the `alpha` and `alpha_bar` columns must agree with them.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut beta = vec![0.0];
        let mut stored_bar = vec![1.0];
        for (idx, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns, found {}", cols.len())));
            }
            let t: usize = cols[0].parse().map_err(|_| bad(format!("bad step {:?}", cols[0])))?;
            if t != beta.len() {
                return Err(bad(format!("steps out of order: expected {}, found {t}", beta.len())));
            }
            let nums: Vec<f64> = cols[1..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad(format!("bad number {c:?}"))))
                .collect::<Result<_>>()?;
            beta.push(nums[0]);
            stored_bar.push(nums[2]);
        }
        let sched = Self::from_betas(beta)?;
        for (t, (&a, &b)) in sched.alpha_bar.iter().zip(&stored_bar).enumerate() {
            if (a - b).abs() > 1e-12 {
                return Err(Error::validation(format!("alpha_bar at step {t} disagrees with betas: {b} vs {a}")));
            }
        }
        Ok(sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_zero_is_one_and_decreasing() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn betas_recomputed_from_alpha_bar() {
        let s = NoiseSchedule::cosine(300).unwrap();
        for t in 1..=300 {
            let b = 1.0 - s.alpha_bar(t) / s.alpha_bar(t - 1);
            assert!((b - s.beta(t)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = NoiseSchedule::cosine(500).unwrap();
        let mut prod = 1.0;
        for t in 1..=500 {
            prod *= s.alpha(t);
            assert!((prod - s.alpha_bar(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints() {
        for steps in [50, 100, 300, 500, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert!(s.alpha_bar(1) > 0.99);
            assert!(s.alpha_bar(steps) < 1e-3);
        }
    }

    #[test]
    fn too_few_steps() {
        assert!(NoiseSchedule::cosine(1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = NoiseSchedule::cosine(100).unwrap();
        s.write_csv(&p).unwrap();
        let back = NoiseSchedule::read_csv(&p).unwrap();
        for t in 0..=100 {
            assert_eq!(back.beta(t), s.beta(t));
            assert_eq!(back.alpha_bar(t), s.alpha_bar(t));
        }
    }
}
