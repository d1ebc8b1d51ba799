use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::data::ObservationMask;
use crate::error::{ensure_shape, Error, Result};

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    ensure_shape(a.dim() == b.dim(), || format!("{what}: {:?} vs {:?}", a.dim(), b.dim()))
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`. Step 0 returns `x0`.
pub fn forward_sample(x0: &Array2<f64>, t: usize, eps: &Array2<f64>, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check_step(t, true)?;
    same_shape(x0, eps, "forward_sample")?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let a = s.alpha_bar(t).sqrt();
    let b = (1.0 - s.alpha_bar(t)).sqrt();
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Posterior mean of `x0` from the score: `(x_t + (1−ᾱ_t)·score) / √ᾱ_t`.
pub fn x0_from_score(x_t: &Array2<f64>, score: &Array2<f64>, t: usize, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check_step(t, false)?;
    same_shape(x_t, score, "x0_from_score")?;
    let ab = s.alpha_bar(t);
    let (k, inv) = (1.0 - ab, 1.0 / ab.sqrt());
    Ok(Zip::from(x_t).and(score).map_collect(|&x, &sc| (x + k * sc) * inv))
}

/// Score implied by a clean-data estimate: `−(x_t − √ᾱ_t·x̂0) / (1−ᾱ_t)`.
pub fn score_from_x0(x_t: &Array2<f64>, x0_hat: &Array2<f64>, t: usize, s: &NoiseSchedule) -> Result<Array2<f64>> {
    s.check_step(t, false)?;
    same_shape(x_t, x0_hat, "score_from_x0")?;
    let ab = s.alpha_bar(t);
    let (root, k) = (ab.sqrt(), 1.0 - ab);
    Ok(Zip::from(x_t).and(x0_hat).map_collect(|&x, &x0| -(x - root * x0) / k))
}

/// Coefficients `(c_state, c_x0, σ)` of the jump from step `t` to `t − dt`.
///
/// For `dt = 1` these are the DDPM posterior coefficients built from the stored
/// `α_t`, `β_t`. For larger strides the single-step `α_t`, `β_t` are replaced by
/// the effective `ᾱ_t/ᾱ_{t−dt}` and `1 − ᾱ_t/ᾱ_{t−dt}`, which makes the jump the
/// exact forward-process posterior `q(x_{t−dt} | x_t, x0)`.
pub fn step_coefficients(t: usize, dt: usize, s: &NoiseSchedule) -> Result<(f64, f64, f64)> {
    s.check_step(t, false)?;
    if dt == 0 || dt > t {
        return Err(Error::validation(format!("stride {dt} must satisfy 1 <= stride <= t = {t}")));
    }
    let prev = t - dt;
    let (a, b) = if dt == 1 {
        (s.alpha(t), s.beta(t))
    } else {
        let a = s.alpha_bar(t) / s.alpha_bar(prev);
        (a, 1.0 - a)
    };
    let denom = 1.0 - s.alpha_bar(t);
    let ab_prev = s.alpha_bar(prev);
    let c_state = a.sqrt() * (1.0 - ab_prev) / denom;
    let c_x0 = ab_prev.sqrt() * b / denom;
    let sigma = if prev == 0 {
        0.0
    } else {
        ((1.0 - ab_prev) / denom * b).sqrt()
    };
    Ok((c_state, c_x0, sigma))
}

/// Strided reverse step `x_t → x_{t−dt}`; noise is dropped on the final jump to 0.
pub fn ddim_step(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    dt: usize,
    z: &Array2<f64>,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    same_shape(x_t, x0_hat, "ddim_step")?;
    same_shape(x_t, z, "ddim_step noise")?;
    let (c_state, c_x0, sigma) = step_coefficients(t, dt, s)?;
    if sigma == 0.0 {
        Ok(Zip::from(x_t).and(x0_hat).map_collect(|&x, &x0| c_state * x + c_x0 * x0))
    } else {
        Ok(Zip::from(x_t)
            .and(x0_hat)
            .and(z)
            .map_collect(|&x, &x0, &n| c_state * x + c_x0 * x0 + sigma * n))
    }
}

/// Ancestral DDPM step `x_t → x_{t−1}` with standard deviation `√β̃_t`.
pub fn ddpm_step(
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    t: usize,
    z: &Array2<f64>,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    ddim_step(x_t, x0_hat, t, 1, z, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Squared,
    Absolute,
}

/// Mean of `(x0 − x̂0)²` over observed entries.
pub fn masked_loss(x0: &Array2<f64>, x0_hat: &Array2<f64>, m: &ObservationMask) -> Result<f64> {
    masked_loss_with(x0, x0_hat, m, LossKind::Squared)
}

pub fn masked_loss_with(x0: &Array2<f64>, x0_hat: &Array2<f64>, m: &ObservationMask, kind: LossKind) -> Result<f64> {
    same_shape(x0, x0_hat, "masked_loss")?;
    same_shape(x0, m.bits(), "masked_loss mask")?;
    let count = m.observed_count();
    if count == 0 {
        return Err(Error::validation("masked loss over an all-zero mask"));
    }
    let mut total = 0.0;
    Zip::from(x0).and(x0_hat).and(m.bits()).for_each(|&a, &b, &bit| {
        if bit == 1.0 {
            let d = a - b;
            total += match kind {
                LossKind::Squared => d * d,
                LossKind::Absolute => d.abs(),
            };
        }
    });
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    #[test]
    fn forward_limits() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = randn((3, 4), &mut rng);
        let eps = randn((3, 4), &mut rng);
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Array2::zeros((3, 4));
        let xt = forward_sample(&zero, 40, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(40)).sqrt();
        assert_eq!(xt, eps.mapv(|e| k * e));
        assert!(forward_sample(&x0, 101, &eps, &s).is_err());
    }

    #[test]
    fn forward_moments_monte_carlo() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let t = 30;
        let x0 = array![[0.7]];
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..draws)
            .map(|_| forward_sample(&x0, t, &randn((1, 1), &mut rng), &s).unwrap()[[0, 0]])
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let want_mean = s.alpha_bar(t).sqrt() * 0.7;
        let want_var = 1.0 - s.alpha_bar(t);
        assert!((mean - want_mean).abs() / want_mean < 0.01);
        assert!((var - want_var).abs() / want_var < 0.01);
    }

    #[test]
    fn single_datum_score_inverts_exactly() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = array![[0.3, 0.9], [0.1, 0.5]];
        for t in [1, 17, 100, 199] {
            let xt = forward_sample(&c, t, &randn((2, 2), &mut rng), &s).unwrap();
            let ab = s.alpha_bar(t);
            let score = xt.mapv(|v| v) - c.mapv(|v| ab.sqrt() * v);
            let score = score.mapv(|v| -v / (1.0 - ab));
            let back = x0_from_score(&xt, &score, t, &s).unwrap();
            for (a, b) in back.iter().zip(c.iter()) {
                assert!((a - b).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn score_round_trip() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = randn((3, 3), &mut rng);
        let x0 = randn((3, 3), &mut rng);
        for t in [1, 50, 99] {
            let sc = score_from_x0(&xt, &x0, t, &s).unwrap();
            let back = x0_from_score(&xt, &sc, t, &s).unwrap();
            for (a, b) in back.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()) / s.alpha_bar(t).sqrt());
            }
        }
        let root = s.alpha_bar(50).sqrt();
        let x0 = xt.mapv(|v| v / root);
        let sc = score_from_x0(&xt, &x0, 50, &s).unwrap();
        assert!(sc.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn score_matches_log_density_finite_differences() {
        // log N(x; √ᾱ x̂0, 1−ᾱ) differentiated numerically in x.
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = randn((2, 3), &mut rng);
        let x0 = randn((2, 3), &mut rng);
        let t = 60;
        let (ab, h) = (s.alpha_bar(t), 1e-5);
        let logp = |x: f64, m: f64| -(x - ab.sqrt() * m).powi(2) / (2.0 * (1.0 - ab));
        let sc = score_from_x0(&xt, &x0, t, &s).unwrap();
        for ((idx, &x), &m) in xt.indexed_iter().zip(x0.iter()) {
            let fd = (logp(x + h, m) - logp(x - h, m)) / (2.0 * h);
            assert!((fd - sc[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn ddpm_zero_and_formula() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let zero = Array2::zeros((2, 2));
        assert_eq!(ddpm_step(&zero, &zero, 10, &zero, &s).unwrap(), zero);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = randn((2, 2), &mut rng);
        let x0 = randn((2, 2), &mut rng);
        let t = 42;
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let c1 = s.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
        let c2 = abp.sqrt() * s.beta(t) / (1.0 - ab);
        let got = ddpm_step(&xt, &x0, t, &zero, &s).unwrap();
        for ((g, a), b) in got.iter().zip(xt.iter()).zip(x0.iter()) {
            assert!((g - (c1 * a + c2 * b)).abs() < 1e-14);
        }
        assert!(ddpm_step(&xt, &x0, 0, &zero, &s).is_err());
    }

    #[test]
    fn ddpm_noise_variance() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let t = 50;
        let zero = Array2::zeros((1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 100_000;
        let outs: Vec<f64> = (0..draws)
            .map(|_| ddpm_step(&zero, &zero, t, &randn((1, 1), &mut rng), &s).unwrap()[[0, 0]])
            .collect();
        let mean = outs.iter().sum::<f64>() / draws as f64;
        let var = outs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        assert!((var - s.posterior_var(t)).abs() / s.posterior_var(t) < 0.02);
    }

    #[test]
    fn stride_one_ddim_is_ddpm() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 1..=50 {
            let xt = randn((3, 2), &mut rng);
            let x0 = randn((3, 2), &mut rng);
            let z = randn((3, 2), &mut rng);
            assert_eq!(ddim_step(&xt, &x0, t, 1, &z, &s).unwrap(), ddpm_step(&xt, &x0, t, &z, &s).unwrap());
        }
    }

    #[test]
    fn last_jump_ignores_noise() {
        let s = NoiseSchedule::cosine(60).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xt = randn((2, 2), &mut rng);
        let x0 = randn((2, 2), &mut rng);
        let z1 = randn((2, 2), &mut rng);
        let z2 = randn((2, 2), &mut rng);
        assert_eq!(
            ddim_step(&xt, &x0, 3, 3, &z1, &s).unwrap(),
            ddim_step(&xt, &x0, 3, 3, &z2, &s).unwrap()
        );
        assert!(ddim_step(&xt, &x0, 3, 4, &z1, &s).is_err());
    }

    #[test]
    fn noiseless_state_lands_on_target_for_any_stride() {
        // With x_t = √ᾱ_t·x0 and a perfect x̂0, each deterministic jump stays on the
        // noiseless trajectory √ᾱ_{t−dt}·x0.
        let s = NoiseSchedule::cosine(300).unwrap();
        let x0 = array![[0.25, 0.75]];
        let zero = Array2::zeros((1, 2));
        for (t, dt) in [(300, 3), (120, 20), (7, 7)] {
            let xt = x0.mapv(|v| v * s.alpha_bar(t).sqrt());
            let got = ddim_step(&xt, &x0, t, dt, &zero, &s).unwrap();
            let want = x0.mapv(|v| v * s.alpha_bar(t - dt).sqrt());
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_loss_examples() {
        let x0 = array![[1.0, 0.0], [0.0, 0.0]];
        let zero = Array2::zeros((2, 2));
        let m = ObservationMask::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(masked_loss(&x0, &zero, &m).unwrap(), 0.5);
        assert_eq!(masked_loss(&x0, &x0, &m).unwrap(), 0.0);
        let mut perturbed = zero.clone();
        perturbed[[0, 1]] = 123.0;
        perturbed[[1, 0]] = -7.0;
        assert_eq!(masked_loss(&x0, &perturbed, &m).unwrap(), 0.5);
        assert!(masked_loss(&x0, &zero, &ObservationMask::zeros(2, 2)).is_err());
        assert_eq!(masked_loss_with(&x0, &zero, &m, LossKind::Absolute).unwrap(), 0.5);
    }
}
