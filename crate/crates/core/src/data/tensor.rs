use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flows × time matrix of nonnegative traffic volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTensor {
    values: Array2<f64>,
}

impl TrafficTensor {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::validation("traffic tensor must have at least one flow and one time slot"));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite traffic value {v} at flow {i}, slot {j}")));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| **v < 0.0) {
            return Err(Error::validation(format!("negative traffic value {v} at flow {i}, slot {j}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(flows: usize, times: usize) -> Self {
        Self {
            values: Array2::zeros((flows, times)),
        }
    }

    pub fn flow_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn time_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Columns `[start, start + len)` as a new tensor.
    pub fn time_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.time_count() {
            return Err(Error::validation(format!(
                "time range {start}..{} outside 0..{}",
                start + len,
                self.time_count()
            )));
        }
        Ok(Self {
            values: self.values.slice(ndarray::s![.., start..start + len]).to_owned(),
        })
    }
}

/// Binary flows × time matrix; 1 marks a measured entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    bits: Array2<f64>,
}

impl ObservationMask {
    pub fn new(bits: Array2<f64>) -> Result<Self> {
        if let Some(((i, j), v)) = bits.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::validation(format!("mask entry {v} at ({i}, {j}) is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn ones(flows: usize, times: usize) -> Self {
        Self {
            bits: Array2::ones((flows, times)),
        }
    }

    pub fn zeros(flows: usize, times: usize) -> Self {
        Self {
            bits: Array2::zeros((flows, times)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.dim()
    }

    /// 0/1 entries as reals, ready for elementwise products.
    pub fn bits(&self) -> &Array2<f64> {
        &self.bits
    }

    pub fn is_observed(&self, flow: usize, time: usize) -> bool {
        self.bits[[flow, time]] == 1.0
    }

    pub fn observed_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1.0).count()
    }

    pub fn time_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.bits.ncols() {
            return Err(Error::validation(format!(
                "time range {start}..{} outside 0..{}",
                start + len,
                self.bits.ncols()
            )));
        }
        Ok(Self {
            bits: self.bits.slice(ndarray::s![.., start..start + len]).to_owned(),
        })
    }

    /// Entrywise AND.
    pub fn and(&self, other: &ObservationMask) -> Result<Self> {
        crate::error::ensure_shape(self.shape() == other.shape(), || {
            format!("mask shapes {:?} and {:?}", self.shape(), other.shape())
        })?;
        Ok(Self {
            bits: &self.bits * &other.bits,
        })
    }

    /// Entrywise complement.
    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.mapv(|b| 1.0 - b),
        }
    }
}

/// Links × flows routing matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    entries: Array2<f64>,
}

impl RoutingMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::validation("routing matrix must be non-empty"));
        }
        if let Some(((i, j), v)) = entries.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("routing entry {v} at ({i}, {j}) outside [0, 1]")));
        }
        Ok(Self { entries })
    }

    pub fn link_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn flow_count(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Keeps only the listed links (rows), in the given order.
    pub fn select_links(&self, links: &[usize]) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::validation("link selection is empty"));
        }
        if let Some(&l) = links.iter().find(|&&l| l >= self.link_count()) {
            return Err(Error::validation(format!("link {l} out of range 0..{}", self.link_count())));
        }
        Ok(Self {
            entries: self.entries.select(ndarray::Axis(0), links),
        })
    }
}

/// Links × time load measurements and the noise level they were taken with.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkLoads {
    pub values: Array2<f64>,
    pub noise_sigma: f64,
}

impl LinkLoads {
    pub fn link_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn time_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn time_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.time_count() {
            return Err(Error::validation(format!(
                "time range {start}..{} outside 0..{}",
                start + len,
                self.time_count()
            )));
        }
        Ok(Self {
            values: self.values.slice(ndarray::s![.., start..start + len]).to_owned(),
            noise_sigma: self.noise_sigma,
        })
    }

    pub fn select_links(&self, links: &[usize]) -> Self {
        Self {
            values: self.values.select(ndarray::Axis(0), links),
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Clip level and divisor used to map raw traffic into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub clip_value: f64,
    pub scale: f64,
}

impl NormalizationParams {
    pub fn new(clip_value: f64, scale: f64) -> Result<Self> {
        if !(clip_value > 0.0 && scale > 0.0 && scale <= clip_value) {
            return Err(Error::validation(format!(
                "normalization needs 0 < scale <= clip_value, got clip {clip_value}, scale {scale}"
            )));
        }
        Ok(Self { clip_value, scale })
    }
}

/// Fixed-length time windows cut from one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Vec<Array2<f64>>,
    pub window_len: usize,
    pub origin_times: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}
