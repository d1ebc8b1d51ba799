//! Reverse-diffusion sampling: unconditional synthesis, tomography and completion.

mod config;
mod em;
mod sampler;
mod series;

pub use config::{GuidanceConfig, RhoMode};
pub use em::{em_refine, em_refine_window, EM_EPS};
pub use sampler::{
    replace_known, sample_completion, sample_tomography, sample_unconditional, sample_windows, FlowObservations,
    LinkObservations, MeasurementSet, SampleOutput, StepResidual,
};
pub use series::{assemble_series, covering_origins};

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::RoutingMatrix;
    use crate::denoiser::X0Model;
    use crate::diffusion::NoiseSchedule;
    use crate::Result;

    /// Ignores its input and returns a fixed window.
    struct Oracle {
        target: Array2<f64>,
        calls: AtomicUsize,
    }

    impl X0Model for Oracle {
        fn flow_count(&self) -> usize {
            self.target.nrows()
        }
        fn window_len(&self) -> usize {
            self.target.ncols()
        }
        fn predict(&self, xs: &[Array2<f64>], _t: usize) -> Result<Vec<Array2<f64>>> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            Ok(vec![self.target.clone(); xs.len()])
        }
        fn predict_with_input_grad(
            &self,
            xs: &[Array2<f64>],
            t: usize,
            _seed: &dyn Fn(usize, &Array2<f64>) -> Array2<f64>,
        ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
            let p = self.predict(xs, t)?;
            let g = xs.iter().map(|x| Array2::zeros(x.dim())).collect();
            Ok((p, g))
        }
    }

    /// `x̂0 = 0.5 + 0.2·x_t`, a smooth stand-in with a non-trivial input gradient.
    struct Affine {
        n: usize,
        w: usize,
    }

    impl X0Model for Affine {
        fn flow_count(&self) -> usize {
            self.n
        }
        fn window_len(&self) -> usize {
            self.w
        }
        fn predict(&self, xs: &[Array2<f64>], _t: usize) -> Result<Vec<Array2<f64>>> {
            Ok(xs.iter().map(|x| x.mapv(|v| 0.5 + 0.2 * v)).collect())
        }
        fn predict_with_input_grad(
            &self,
            xs: &[Array2<f64>],
            t: usize,
            seed: &dyn Fn(usize, &Array2<f64>) -> Array2<f64>,
        ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
            let p = self.predict(xs, t)?;
            let g = p.iter().enumerate().map(|(b, x0)| seed(b, x0) * 0.2).collect();
            Ok((p, g))
        }
    }

    fn oracle(n: usize, w: usize) -> Oracle {
        Oracle {
            target: Array2::from_shape_fn((n, w), |(i, j)| 0.1 + 0.05 * (i + j) as f64),
            calls: AtomicUsize::new(0),
        }
    }

    fn routing() -> RoutingMatrix {
        RoutingMatrix::new(ndarray::array![
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 1.0]
        ])
        .unwrap()
    }

    #[test]
    fn oracle_sampling_lands_on_target() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let m = oracle(3, 4);
        let out = sample_unconditional(&m, &s, 2, &GuidanceConfig::unguided()).unwrap();
        for x in &out.windows {
            let err = (x - &m.target).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-3);
        }
    }

    #[test]
    fn denoiser_call_counts() {
        let s = NoiseSchedule::cosine(300).unwrap();
        let m = oracle(2, 2);
        let out = sample_unconditional(&m, &s, 1, &GuidanceConfig::unguided()).unwrap();
        assert_eq!(out.denoiser_calls, 300);
        assert_eq!(m.calls.load(Ordering::Relaxed), 300);
        let cfg = GuidanceConfig {
            stride: 300,
            ..GuidanceConfig::unguided()
        };
        let one = sample_unconditional(&m, &s, 1, &cfg).unwrap();
        assert_eq!(one.denoiser_calls, 1);
        assert_eq!(one.windows[0], m.target);
    }

    #[test]
    fn guidance_off_matches_unconditional() {
        let s = NoiseSchedule::cosine(40).unwrap();
        let m = Affine { n: 4, w: 3 };
        let a = routing();
        let loads = vec![Array2::from_elem((3, 3), 0.8); 3];
        let cfg = GuidanceConfig {
            seed: 9,
            ..GuidanceConfig::unguided()
        };
        let plain = sample_unconditional(&m, &s, 3, &cfg).unwrap();
        let tomo = sample_tomography(&m, &s, LinkObservations { routing: a, loads }, &cfg).unwrap();
        assert_eq!(plain.windows, tomo.windows);
    }

    #[test]
    fn completion_extremes() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let m = Affine { n: 4, w: 3 };
        let known = vec![Array2::from_shape_fn((4, 3), |(i, j)| 0.1 * (i + j) as f64); 2];
        let cfg = GuidanceConfig {
            seed: 2,
            ..GuidanceConfig::default()
        };
        let full = FlowObservations {
            known: known.clone(),
            masks: vec![Array2::ones((4, 3)); 2],
        };
        let out = sample_completion(&m, &s, full, None, &cfg).unwrap();
        assert_eq!(out.windows, known);

        let none = FlowObservations {
            known: known.clone(),
            masks: vec![Array2::zeros((4, 3)); 2],
        };
        let out = sample_completion(&m, &s, none, None, &cfg).unwrap();
        assert_eq!(out.windows, sample_unconditional(&m, &s, 2, &cfg).unwrap().windows);

        let mask = Array2::from_shape_fn((4, 3), |(i, j)| ((i + j) % 2) as f64);
        let mixed = FlowObservations {
            known: known.clone(),
            masks: vec![mask.clone(); 2],
        };
        let out = sample_completion(&m, &s, mixed, Some(LinkObservations { routing: routing(), loads: vec![Array2::from_elem((3, 3), 0.5); 2] }), &cfg).unwrap();
        for (x, k) in out.windows.iter().zip(&known) {
            for ((v, kv), b) in x.iter().zip(k).zip(&mask) {
                if *b == 1.0 {
                    assert_eq!(v.to_bits(), kv.to_bits());
                }
            }
        }
    }

    #[test]
    fn consistent_oracle_has_zero_residual() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let m = oracle(3, 2);
        let eye = RoutingMatrix::new(Array2::eye(3)).unwrap();
        let links = LinkObservations {
            routing: eye,
            loads: vec![m.target.clone()],
        };
        let out = sample_tomography(&m, &s, links, &GuidanceConfig::default()).unwrap();
        assert!(out.trace.iter().all(|r| r.link == Some(0.0)));
        assert!(out.windows[0].iter().zip(&m.target).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn oracle_residual_is_constant() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let m = oracle(4, 2);
        let loads = vec![Array2::from_elem((3, 2), 0.9)];
        let out = sample_tomography(&m, &s, LinkObservations { routing: routing(), loads }, &GuidanceConfig::default()).unwrap();
        let first = out.trace[0].link.unwrap();
        assert!(first > 0.0);
        assert!(out.trace.iter().all(|r| r.link == Some(first)));
    }

    #[test]
    fn replacement_marginals() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let t = 40;
        let known = Array2::from_elem((1, 1), 0.7);
        let mask = Array2::ones((1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = Array2::zeros((1, 1));
                replace_known(&mut x, &known, &mask, t, &s, &mut rng).unwrap();
                x[[0, 0]]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_mean = s.alpha_bar(t).sqrt() * 0.7;
        let want_var = 1.0 - s.alpha_bar(t);
        assert!((mean - want_mean).abs() < 0.02 * want_mean, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 0.02 * want_var, "variance {var} vs {want_var}");

        let mut x = Array2::from_elem((2, 2), 3.0);
        replace_known(&mut x, &Array2::zeros((2, 2)), &Array2::zeros((2, 2)), 5, &s, &mut rng).unwrap();
        assert!(x.iter().all(|&v| v == 3.0));
        let mut x = Array2::from_elem((1, 1), 3.0);
        replace_known(&mut x, &known, &mask, 0, &s, &mut rng).unwrap();
        assert_eq!(x[[0, 0]], 0.7);
    }

    #[test]
    fn results_do_not_depend_on_jobs() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let m = Affine { n: 4, w: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loads: Vec<Array2<f64>> = (0..5).map(|_| Array2::from_shape_simple_fn((3, 3), || rng.random_range(0.2..1.0))).collect();
        let base = GuidanceConfig {
            batch_size: 2,
            seed: 4,
            ..GuidanceConfig::default()
        };
        let links = LinkObservations { routing: routing(), loads };
        let one = sample_tomography(&m, &s, links.clone(), &base).unwrap();
        let many = sample_tomography(&m, &s, links, &GuidanceConfig { jobs: 3, ..base }).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn guidance_reduces_link_residual() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let m = Affine { n: 4, w: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<Array2<f64>> = (0..8).map(|_| Array2::from_shape_simple_fn((4, 3), || rng.random_range(0.1..0.9))).collect();
        let a = routing();
        let loads: Vec<Array2<f64>> = truth.iter().map(|x| a.entries().dot(x)).collect();
        let residual = |out: &SampleOutput| -> f64 {
            out.windows.iter().zip(&loads).map(|(x, y)| (y - &a.entries().dot(x)).mapv(|v| v * v).sum()).sum()
        };
        let links = LinkObservations { routing: a.clone(), loads: loads.clone() };
        let cfg = GuidanceConfig {
            em_iters: 0,
            ..GuidanceConfig::default()
        };
        let guided = sample_tomography(&m, &s, links.clone(), &cfg).unwrap();
        let plain = sample_tomography(&m, &s, links, &GuidanceConfig { rho_fixed: 0.0, ..cfg }).unwrap();
        assert!(residual(&guided) < residual(&plain));
    }

    #[test]
    fn shape_errors() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let m = Affine { n: 4, w: 3 };
        let bad = LinkObservations {
            routing: routing(),
            loads: vec![Array2::zeros((2, 3))],
        };
        assert!(sample_tomography(&m, &s, bad, &GuidanceConfig::default()).is_err());
        let bad_mask = FlowObservations {
            known: vec![Array2::zeros((4, 3))],
            masks: vec![Array2::from_elem((4, 3), 0.5)],
        };
        assert!(sample_completion(&m, &s, bad_mask, None, &GuidanceConfig::default()).is_err());
    }
}
