use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{LinkLoads, ObservationMask, RoutingMatrix, TrafficTensor};
use crate::error::{Error, Result};

/// Mask with exactly `round(rate·N·T)` ones at uniformly random positions.
pub fn build_random_mask(shape: (usize, usize), rate: f64, seed: u64) -> Result<ObservationMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::validation(format!("sampling rate {rate} outside (0, 1]")));
    }
    let (n, t) = shape;
    let total = n * t;
    let ones = ((rate * total as f64).round() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = Array2::zeros(shape);
    let flat = bits.as_slice_mut().expect("fresh arrays are contiguous");
    for idx in rand::seq::index::sample(&mut rng, total, ones) {
        flat[idx] = 1.0;
    }
    ObservationMask::new(bits)
}

/// `Y = A·X + z` with `z` i.i.d. `N(0, σ²)` per entry.
pub fn link_loads(a: &RoutingMatrix, x: &TrafficTensor, sigma_z: f64, seed: u64) -> Result<LinkLoads> {
    if a.flow_count() != x.flow_count() {
        return Err(Error::shape(format!(
            "routing matrix covers {} flows but traffic has {}",
            a.flow_count(),
            x.flow_count()
        )));
    }
    if !(sigma_z >= 0.0 && sigma_z.is_finite()) {
        return Err(Error::validation(format!("noise sigma {sigma_z} must be finite and nonnegative")));
    }
    let mut values = a.entries().dot(x.values());
    if sigma_z > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_z).expect("sigma checked above");
        values.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    Ok(LinkLoads {
        values,
        noise_sigma: sigma_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_rate_is_all_ones() {
        let m = build_random_mask((4, 6), 1.0, 3).unwrap();
        assert_eq!(m.observed_count(), 24);
    }

    #[test]
    fn half_rate_count_and_determinism() {
        let a = build_random_mask((24, 12), 0.5, 11).unwrap();
        assert_eq!(a.observed_count(), 144);
        let b = build_random_mask((24, 12), 0.5, 11).unwrap();
        assert_eq!(a, b);
        let c = build_random_mask((24, 12), 0.5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(build_random_mask((2, 2), 0.0, 0).is_err());
        assert!(build_random_mask((2, 2), -0.5, 0).is_err());
    }

    #[test]
    fn identity_routing_reproduces_traffic() {
        let x = TrafficTensor::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let a = RoutingMatrix::new(Array2::eye(2)).unwrap();
        assert_eq!(link_loads(&a, &x, 0.0, 0).unwrap().values, x.values().clone());
    }

    #[test]
    fn all_ones_row_sums_flows() {
        let x = TrafficTensor::new(array![[1.0], [2.0], [3.0]]).unwrap();
        let a = RoutingMatrix::new(array![[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(link_loads(&a, &x, 0.0, 0).unwrap().values, array![[6.0]]);
    }

    #[test]
    fn shape_mismatch() {
        let x = TrafficTensor::zeros(3, 2);
        let a = RoutingMatrix::new(Array2::eye(2)).unwrap();
        assert!(matches!(link_loads(&a, &x, 0.0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_is_centred() {
        let sigma = 0.3;
        let draws = 100_000;
        let x = TrafficTensor::new(Array2::from_elem((1, draws), 2.0)).unwrap();
        let a = RoutingMatrix::new(array![[0.5]]).unwrap();
        let y = link_loads(&a, &x, sigma, 99).unwrap();
        let mean = y.values.iter().map(|v| v - 1.0).sum::<f64>() / draws as f64;
        assert!(mean.abs() < 4.0 * sigma / (draws as f64).sqrt(), "mean {mean}");
    }
}
