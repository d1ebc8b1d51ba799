use ndarray::{s, Array2};

use crate::data::TrafficTensor;
use crate::error::{ensure_shape, Error, Result};

/// Window origins `0, w, 2w, …` plus one window flush with the end when `w`
/// does not divide `total`.
pub fn covering_origins(total: usize, w: usize) -> Result<Vec<usize>> {
    if w == 0 || total < w {
        return Err(Error::validation(format!("cannot cover {total} slots with windows of {w}")));
    }
    let mut origins: Vec<usize> = (0..=total - w).step_by(w).collect();
    if origins.last() != Some(&(total - w)) {
        origins.push(total - w);
    }
    Ok(origins)
}

/// Places windows at their origins; overlapping cells take the mean.
pub fn assemble_series(windows: &[Array2<f64>], origin_times: &[usize]) -> Result<TrafficTensor> {
    ensure_shape(windows.len() == origin_times.len(), || {
        format!("{} windows but {} origins", windows.len(), origin_times.len())
    })?;
    let Some(first) = windows.first() else {
        return Err(Error::validation("no windows to assemble"));
    };
    let (n, w) = first.dim();
    let total = origin_times.iter().map(|o| o + w).max().unwrap_or(0);
    let mut sum = Array2::<f64>::zeros((n, total));
    let mut count = vec![0usize; total];
    for (x, &o) in windows.iter().zip(origin_times) {
        ensure_shape(x.dim() == (n, w), || format!("window {:?} vs {:?}", x.dim(), (n, w)))?;
        let mut view = sum.slice_mut(s![.., o..o + w]);
        view += x;
        count[o..o + w].iter_mut().for_each(|c| *c += 1);
    }
    if let Some(gap) = count.iter().position(|&c| c == 0) {
        return Err(Error::validation(format!("time slot {gap} is not covered by any window")));
    }
    for (t, &c) in count.iter().enumerate() {
        if c > 1 {
            sum.column_mut(t).mapv_inplace(|v| v / c as f64);
        }
    }
    TrafficTensor::new(sum)
}
