use super::tensor::{NormalizationParams, TrafficTensor};
use crate::error::{Error, Result};

pub const CLIP_PERCENTILE: f64 = 0.99;

/// Percentile by linear interpolation between order statistics (rank `p·(n−1)`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Fits clip level and scale on `x`, then applies them.
pub fn clip_and_normalize(x: &TrafficTensor) -> Result<(TrafficTensor, NormalizationParams)> {
    let params = fit_normalization(x)?;
    Ok((apply_normalization(x, &params)?, params))
}

pub fn fit_normalization(x: &TrafficTensor) -> Result<NormalizationParams> {
    let flat: Vec<f64> = x.values().iter().copied().collect();
    let max = flat.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(Error::validation("cannot normalize an all-zero tensor: scale undefined"));
    }
    let mut clip_value = percentile(&flat, CLIP_PERCENTILE);
    if clip_value <= 0.0 {
        // More than 99% zeros: clipping would erase every positive entry.
        clip_value = max;
    }
    let scale = flat.iter().map(|v| v.min(clip_value)).fold(0.0_f64, f64::max);
    NormalizationParams::new(clip_value, scale)
}

/// Clips at `params.clip_value` and divides by `params.scale`; values land in `[0, clip/scale]`,
/// which is `[0, 1]` on the data the params were fit on.
pub fn apply_normalization(x: &TrafficTensor, params: &NormalizationParams) -> Result<TrafficTensor> {
    let clip = params.clip_value;
    let scale = params.scale;
    TrafficTensor::new(x.values().mapv(|v| v.min(clip) / scale))
}

pub fn denormalize(xn: &TrafficTensor, params: &NormalizationParams) -> TrafficTensor {
    TrafficTensor::new(xn.values().mapv(|v| v * params.scale)).expect("scaling keeps values finite and nonnegative")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tensor(values: Vec<f64>, rows: usize) -> TrafficTensor {
        let cols = values.len() / rows;
        TrafficTensor::new(Array2::from_shape_vec((rows, cols), values).unwrap()).unwrap()
    }

    #[test]
    fn one_to_hundred() {
        // Sorted entries 1..=100, rank 0.99·99 = 98.01 → 99 + 0.01·(100 − 99).
        let x = tensor((1..=100).map(f64::from).collect(), 10);
        let (xn, p) = clip_and_normalize(&x).unwrap();
        assert!((p.clip_value - 99.01).abs() < 1e-12);
        assert_eq!(p.scale, p.clip_value);
        let max = xn.values().iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
        let changed = x.values().iter().filter(|&&v| v > p.clip_value).count();
        assert!(changed as f64 <= 0.01 * 100.0);
    }

    #[test]
    fn all_zero_rejected() {
        let x = TrafficTensor::zeros(3, 4);
        assert!(clip_and_normalize(&x).is_err());
    }

    #[test]
    fn denormalize_endpoints() {
        let p = NormalizationParams::new(10.0, 8.0).unwrap();
        let xn = tensor(vec![0.0, 1.0, 0.25, 0.5], 2);
        let x = denormalize(&xn, &p);
        assert_eq!(x.values().as_slice().unwrap(), &[0.0, 8.0, 2.0, 4.0]);
    }

    #[test]
    fn mostly_zero_tensor_still_normalizes() {
        let mut v = vec![0.0; 200];
        v[7] = 5.0;
        let (xn, p) = clip_and_normalize(&tensor(v, 4)).unwrap();
        assert_eq!(p.scale, 5.0);
        assert_eq!(xn.values()[[0, 7]], 1.0);
    }
}
