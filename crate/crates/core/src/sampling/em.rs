use ndarray::{Array1, Array2, ArrayView1};

use crate::data::RoutingMatrix;
use crate::error::{ensure_shape, Error, Result};

/// Floor applied to flows and denominators of the EM update.
pub const EM_EPS: f64 = 1e-9;

/// `iters` multiplicative EM updates
/// `x_j ← (x_j / Σ_i a_ij) · Σ_i a_ij·y_i / (A x)_i`, starting from `max(x, ε)`.
///
/// Links whose current load `(A x)_i` is below ε are left out of the sum, and
/// flows that cross no link keep their value.
pub fn em_refine(x: ArrayView1<f64>, a: &RoutingMatrix, y: ArrayView1<f64>, iters: usize) -> Result<Array1<f64>> {
    let am = a.entries();
    ensure_shape(x.len() == am.ncols(), || format!("{} flows vs routing with {} columns", x.len(), am.ncols()))?;
    ensure_shape(y.len() == am.nrows(), || format!("{} loads vs routing with {} rows", y.len(), am.nrows()))?;
    if y.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::validation("link loads for EM must be non-negative"));
    }
    let col_sums = am.sum_axis(ndarray::Axis(0));
    let mut x = x.mapv(|v| if v > EM_EPS { v } else { EM_EPS });
    for _ in 0..iters {
        let ax = am.dot(&x);
        let ratio = Array1::from_shape_fn(ax.len(), |i| if ax[i] < EM_EPS { 0.0 } else { y[i] / ax[i] });
        let back = am.t().dot(&ratio);
        for j in 0..x.len() {
            if col_sums[j] > 0.0 {
                x[j] *= back[j] / col_sums[j];
            }
        }
    }
    Ok(x)
}

/// Applies [`em_refine`] to every time column of an `N × w` window.
pub fn em_refine_window(x: &Array2<f64>, a: &RoutingMatrix, y: &Array2<f64>, iters: usize) -> Result<Array2<f64>> {
    ensure_shape(x.ncols() == y.ncols(), || format!("window has {} slots, loads have {}", x.ncols(), y.ncols()))?;
    let mut out = Array2::zeros(x.dim());
    for t in 0..x.ncols() {
        out.column_mut(t).assign(&em_refine(x.column(t), a, y.column(t), iters)?);
    }
    Ok(out)
}
