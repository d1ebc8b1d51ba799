use super::tensor::{ObservationMask, TrafficTensor};
use crate::error::{ensure_shape, Error, Result};

/// Additive row/column-mean interpolation over observed entries.
///
/// `X_base(i, j) = X̄ + flow_dev(i) + time_dev(j)`, where the deviations are the
/// mean of `X − X̄` over the observed entries of row `i` / column `j` (0 when a
/// row or column has none). Observed entries are copied back unchanged, and the
/// result is floored at 0.
pub fn baseline_interpolate(x: &TrafficTensor, m: &ObservationMask) -> Result<TrafficTensor> {
    ensure_shape(x.shape() == m.shape(), || {
        format!("traffic {:?} vs mask {:?}", x.shape(), m.shape())
    })?;
    let observed = m.observed_count();
    if observed == 0 {
        return Err(Error::validation("baseline interpolation needs at least one observed entry"));
    }
    let (n, t) = x.shape();
    let xv = x.values();
    let bits = m.bits();

    let mean = xv.iter().zip(bits.iter()).filter(|(_, &b)| b == 1.0).map(|(v, _)| v).sum::<f64>()
        / observed as f64;

    let deviation = |pairs: &mut dyn Iterator<Item = (f64, f64)>| {
        let (sum, count) = pairs
            .filter(|&(_, b)| b == 1.0)
            .fold((0.0, 0usize), |(s, c), (v, _)| (s + (v - mean), c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    let flow_dev: Vec<f64> = (0..n)
        .map(|i| deviation(&mut xv.row(i).iter().copied().zip(bits.row(i).iter().copied())))
        .collect();
    let time_dev: Vec<f64> = (0..t)
        .map(|j| deviation(&mut xv.column(j).iter().copied().zip(bits.column(j).iter().copied())))
        .collect();

    let mut out = xv.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if bits[[i, j]] != 1.0 {
            *v = (mean + flow_dev[i] + time_dev[j]).max(0.0);
        }
    }
    TrafficTensor::new(out)
}
