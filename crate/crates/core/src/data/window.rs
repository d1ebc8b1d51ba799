use ndarray::s;

use super::tensor::{ObservationMask, TrafficTensor, WindowBatch};
use crate::error::{Error, Result};

/// Cuts `[k·stride, k·stride + w)` windows; a trailing remainder shorter than `w` is dropped.
pub fn make_windows(x: &TrafficTensor, w: usize, stride: usize) -> Result<WindowBatch> {
    let windows = window_origins(x.time_count(), w, stride)?;
    Ok(WindowBatch {
        windows: windows
            .iter()
            .map(|&o| x.values().slice(s![.., o..o + w]).to_owned())
            .collect(),
        window_len: w,
        origin_times: windows,
    })
}

/// Windows the mask with the same origins as [`make_windows`].
pub fn make_mask_windows(m: &ObservationMask, w: usize, stride: usize) -> Result<Vec<ObservationMask>> {
    window_origins(m.shape().1, w, stride)?
        .into_iter()
        .map(|o| m.time_slice(o, w))
        .collect()
}

pub fn window_origins(time_count: usize, w: usize, stride: usize) -> Result<Vec<usize>> {
    if w == 0 || stride == 0 {
        return Err(Error::validation("window length and stride must be positive"));
    }
    if w > time_count {
        return Err(Error::validation(format!(
            "window length {w} exceeds the {time_count} available time slots"
        )));
    }
    let count = (time_count - w) / stride + 1;
    Ok((0..count).map(|k| k * stride).collect())
}

/// Contiguous split into `[0, train_len)` and `[train_len, train_len + test_len)`.
pub fn train_test_split(
    x: &TrafficTensor,
    train_len: usize,
    test_len: usize,
) -> Result<(TrafficTensor, TrafficTensor)> {
    if train_len == 0 || test_len == 0 {
        return Err(Error::validation("train and test lengths must be positive"));
    }
    if train_len + test_len > x.time_count() {
        return Err(Error::validation(format!(
            "split {train_len}+{test_len} needs more than the {} available time slots",
            x.time_count()
        )));
    }
    Ok((x.time_slice(0, train_len)?, x.time_slice(train_len, test_len)?))
}
