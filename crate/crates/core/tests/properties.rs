use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tm_diffuse::data::{
    apply_normalization, build_random_mask, denormalize, fit_normalization, make_windows, NormalizationParams,
    ObservationMask, RoutingMatrix, TrafficTensor,
};
use tm_diffuse::diffusion::{forward_sample, step_coefficients, score_from_x0, x0_from_score, NoiseSchedule};
use tm_diffuse::metrics::{aggregate_tre, mmd2, nmae, nrmse, KernelConfig, Scope};
use tm_diffuse::sampling::{assemble_series, covering_origins, em_refine, replace_known};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn bits(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::bool::ANY, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
}

/// `Σ y log(y / Ax) − y + Ax`, the quantity the multiplicative EM update descends.
fn i_divergence(a: &Array2<f64>, x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    a.dot(x)
        .iter()
        .zip(y)
        .map(|(&ax, &yi)| if yi > 0.0 { yi * (yi / ax).ln() - yi + ax } else { ax })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_schedule_is_monotone(steps in 2usize..1500) {
        let s = NoiseSchedule::cosine(steps).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.posterior_var(t) >= 0.0 && s.posterior_var(t) <= s.beta(t));
        }
    }

    #[test]
    fn tweedie_inverts_the_forward_process(x0 in matrix(3, 4, 0.0, 1.0), eps in matrix(3, 4, -3.0, 3.0), t in 1usize..100) {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x_t = forward_sample(&x0, t, &eps, &s).unwrap();
        let score = score_from_x0(&x_t, &x0, t, &s).unwrap();
        let back = x0_from_score(&x_t, &score, t, &s).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()) / s.alpha_bar(t).sqrt());
        }
    }

    #[test]
    fn strided_jump_composes_forward_marginals(t in 2usize..200, frac in 0.0f64..1.0) {
        let s = NoiseSchedule::cosine(200).unwrap();
        let dt = 1 + ((t - 1) as f64 * frac) as usize;
        let (c_state, c_x0, sigma) = step_coefficients(t, dt, &s).unwrap();
        // Pushing x_t ~ N(√ᾱ_t x0, 1−ᾱ_t) through the jump recovers the marginal at t − dt.
        let prev = t - dt;
        let mean = c_state * s.alpha_bar(t).sqrt() + c_x0;
        let var = c_state * c_state * (1.0 - s.alpha_bar(t)) + sigma * sigma;
        prop_assert!((mean - s.alpha_bar(prev).sqrt()).abs() < 1e-9);
        prop_assert!((var - (1.0 - s.alpha_bar(prev))).abs() < 1e-9);
    }

    #[test]
    fn error_metrics_are_scale_free(x in matrix(3, 5, 0.1, 10.0), xh in matrix(3, 5, 0.0, 10.0), m in bits(3, 5), c in 0.01f64..100.0) {
        let mut m = m;
        m[[0, 0]] = 0.0;
        let mask = ObservationMask::new(m).unwrap();
        let (xs, xhs) = (&x * c, &xh * c);
        let a = nmae(&x, &xh, Scope::Unobserved(&mask)).unwrap();
        let b = nmae(&xs, &xhs, Scope::Unobserved(&mask)).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a));
        let a = nrmse(&x, &xh, Scope::All).unwrap();
        let b = nrmse(&xs, &xhs, Scope::All).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a));
        prop_assert_eq!(nmae(&x, &x, Scope::All).unwrap(), 0.0);
    }

    #[test]
    fn observed_entries_never_count(x in matrix(2, 6, 0.1, 5.0), xh in matrix(2, 6, 0.0, 5.0), junk in matrix(2, 6, -50.0, 50.0), m in bits(2, 6)) {
        let mut m = m;
        m[[1, 5]] = 0.0;
        let mask = ObservationMask::new(m.clone()).unwrap();
        let spoiled = ndarray::Zip::from(&xh).and(&junk).and(&m).map_collect(|&v, &j, &b| if b == 1.0 { j } else { v });
        prop_assert_eq!(nmae(&x, &xh, Scope::Unobserved(&mask)).unwrap(), nmae(&x, &spoiled, Scope::Unobserved(&mask)).unwrap());
        prop_assert_eq!(nrmse(&x, &xh, Scope::Unobserved(&mask)).unwrap(), nrmse(&x, &spoiled, Scope::Unobserved(&mask)).unwrap());
    }

    #[test]
    fn mmd_is_symmetric(xs in matrix(5, 3, 0.0, 1.0), ys in matrix(7, 3, 0.0, 1.0)) {
        for k in [KernelConfig::Median, KernelConfig::Fixed(0.7)] {
            let a = mmd2(&xs, &ys, k).unwrap();
            let b = mmd2(&ys, &xs, k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_ignores_row_order(xs in matrix(6, 2, 0.0, 1.0), ys in matrix(4, 2, 0.0, 1.0)) {
        let rev = Array2::from_shape_fn(xs.dim(), |(i, j)| xs[[xs.nrows() - 1 - i, j]]);
        let a = mmd2(&xs, &ys, KernelConfig::Median).unwrap();
        let b = mmd2(&rev, &ys, KernelConfig::Median).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tre_groups_cover_every_slot(n in 1usize..40, group in 1usize..10) {
        let vals: Vec<Option<f64>> = (0..n).map(|i| (i % 4 != 0).then_some(i as f64)).collect();
        let out = aggregate_tre(&vals, group).unwrap();
        prop_assert_eq!(out.len(), n.div_ceil(group));
    }

    #[test]
    fn em_never_raises_the_divergence(a in bits(4, 8), x in matrix(8, 1, 0.01, 2.0), truth in matrix(8, 1, 0.0, 2.0)) {
        let mut a = a;
        for j in 0..8 {
            a[[j % 4, j]] = 1.0;
        }
        let r = RoutingMatrix::new(a.clone()).unwrap();
        let y = a.dot(&truth.column(0));
        let mut cur = x.column(0).to_owned();
        let mut last = i_divergence(&a, &cur, &y);
        for _ in 0..30 {
            cur = em_refine(cur.view(), &r, y.view(), 1).unwrap();
            prop_assert!(cur.iter().all(|v| *v >= 0.0 && v.is_finite()));
            let d = i_divergence(&a, &cur, &y);
            prop_assert!(d <= last + 1e-9 * (1.0 + last));
            last = d;
        }
    }

    #[test]
    fn em_fixes_exact_solutions(a in matrix(3, 5, 0.0, 1.0), x in matrix(5, 1, 0.1, 3.0)) {
        let r = RoutingMatrix::new(a.clone()).unwrap();
        let x = x.column(0).to_owned();
        let y = a.dot(&x);
        let out = em_refine(x.view(), &r, y.view(), 10).unwrap();
        for (p, q) in out.iter().zip(&x) {
            prop_assert!((p - q).abs() < 1e-12 * (1.0 + q));
        }
    }

    #[test]
    fn normalization_round_trips_to_the_clipped_series(x in matrix(4, 30, 0.0, 1e6)) {
        let t = TrafficTensor::new(x.clone()).unwrap();
        let p = fit_normalization(&t).unwrap();
        let n = apply_normalization(&t, &p).unwrap();
        prop_assert!(n.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize(&n, &p);
        for (b, v) in back.values().iter().zip(&x) {
            let clipped = v.min(p.clip_value);
            prop_assert!((b - clipped).abs() <= 1e-9 * (1.0 + clipped));
        }
    }

    #[test]
    fn window_count_matches_formula(t in 1usize..80, w in 1usize..20, stride in 1usize..10) {
        let x = TrafficTensor::zeros(2, t);
        match make_windows(&x, w, stride) {
            Ok(b) => {
                prop_assert!(w <= t);
                prop_assert_eq!(b.len(), (t - w) / stride + 1);
                prop_assert!(b.origin_times.windows(2).all(|p| p[0] < p[1]));
                prop_assert!(b.windows.iter().all(|x| x.ncols() == w));
            }
            Err(_) => prop_assert!(w > t),
        }
    }

    #[test]
    fn covering_windows_reassemble_the_series(t in 1usize..60, w in 1usize..13, x in matrix(2, 60, 0.0, 1.0)) {
        prop_assume!(w <= t);
        let x = x.slice(ndarray::s![.., ..t]).to_owned();
        let origins = covering_origins(t, w).unwrap();
        let windows: Vec<_> = origins.iter().map(|&o| x.slice(ndarray::s![.., o..o + w]).to_owned()).collect();
        let series = assemble_series(&windows, &origins).unwrap();
        prop_assert_eq!(series.values(), &x);
    }

    #[test]
    fn random_masks_have_the_requested_count(n in 1usize..10, t in 1usize..40, rate in 0.01f64..1.0, seed in any::<u64>()) {
        let m = build_random_mask((n, t), rate, seed).unwrap();
        prop_assert_eq!(m.observed_count(), (rate * (n * t) as f64).round() as usize);
        prop_assert_eq!(m, build_random_mask((n, t), rate, seed).unwrap());
    }

    #[test]
    fn replacement_only_touches_observed_entries(x in matrix(3, 4, -2.0, 2.0), known in matrix(3, 4, 0.0, 1.0), m in bits(3, 4), t in 0usize..50, seed in any::<u64>()) {
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut y = x.clone();
        replace_known(&mut y, &known, &m, t, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for ((&after, &before), (&k, &b)) in y.iter().zip(&x).zip(known.iter().zip(&m)) {
            if b == 0.0 {
                prop_assert_eq!(after, before);
            } else if t == 0 {
                prop_assert_eq!(after, k);
            }
        }
    }
}

#[test]
fn normalization_params_reject_inverted_scale() {
    assert!(NormalizationParams::new(1.0, 2.0).is_err());
    assert!(NormalizationParams::new(0.0, 0.0).is_err());
}
