use ndarray::{concatenate, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

/// Bandwidth of the Gaussian kernel `exp(−‖x − y‖² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelConfig {
    Fixed(f64),
    /// Median pairwise distance of the pooled samples.
    #[default]
    Median,
}

/// Rows of `xs` flattened in row-major order, one sample per row.
pub fn flatten_windows(xs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let Some(first) = xs.first() else {
        return Err(Error::validation("no windows to flatten"));
    };
    let d = first.len();
    let mut out = Array2::zeros((xs.len(), d));
    for (row, x) in out.rows_mut().into_iter().zip(xs) {
        ensure_shape(x.len() == d, || format!("window with {} entries, expected {d}", x.len()))?;
        row.into_iter().zip(x.iter()).for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances between distinct rows.
pub fn median_bandwidth(pooled: &Array2<f64>) -> Result<f64> {
    let n = pooled.nrows();
    let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled.row(i), pooled.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::validation("median bandwidth needs at least two samples"));
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        Ok(med)
    } else {
        // Mostly identical samples: any positive bandwidth gives the same kernel on them.
        Ok(1.0)
    }
}

fn bandwidth(xs: &Array2<f64>, ys: &Array2<f64>, k: KernelConfig) -> Result<f64> {
    match k {
        KernelConfig::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        KernelConfig::Fixed(s) => Err(Error::validation(format!("kernel bandwidth {s} must be positive"))),
        KernelConfig::Median => median_bandwidth(&concatenate![Axis(0), xs.view(), ys.view()]),
    }
}

fn check_sets(xs: &Array2<f64>, ys: &Array2<f64>) -> Result<()> {
    if xs.nrows() < 2 || ys.nrows() < 2 {
        return Err(Error::validation(format!(
            "the unbiased MMD needs at least two samples per set, got {} and {}",
            xs.nrows(),
            ys.nrows()
        )));
    }
    ensure_shape(xs.ncols() == ys.ncols(), || format!("sample dims {} vs {}", xs.ncols(), ys.ncols()))
}

fn mmd2_with(xs: &Array2<f64>, ys: &Array2<f64>, sigma: f64) -> f64 {
    let g = -1.0 / (2.0 * sigma * sigma);
    let k = |a: ArrayView1<f64>, b: ArrayView1<f64>| (g * sq_dist(a, b)).exp();
    let (n, m) = (xs.nrows(), ys.nrows());
    let within = |s: &Array2<f64>| {
        let mut acc = 0.0;
        for i in 0..s.nrows() {
            for j in i + 1..s.nrows() {
                acc += k(s.row(i), s.row(j));
            }
        }
        2.0 * acc
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(xs.row(i), ys.row(j));
        }
    }
    within(xs) / (n * (n - 1)) as f64 + within(ys) / (m * (m - 1)) as f64 - 2.0 * cross / (n * m) as f64
}

/// Unbiased squared maximum mean discrepancy between two sample sets (rows are samples).
pub fn mmd2(xs: &Array2<f64>, ys: &Array2<f64>, k: KernelConfig) -> Result<f64> {
    check_sets(xs, ys)?;
    let sigma = bandwidth(xs, ys, k)?;
    Ok(mmd2_with(xs, ys, sigma))
}

/// MMD statistic with its permutation null distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    pub bandwidth: f64,
    pub null_mean: f64,
    pub null_std: f64,
    /// Fraction of permutations at least as large as the statistic (with the +1 correction).
    pub p_value: f64,
}

/// Re-splits the pooled samples `permutations` times with a fixed bandwidth.
pub fn mmd2_permutation_test(
    xs: &Array2<f64>,
    ys: &Array2<f64>,
    k: KernelConfig,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    check_sets(xs, ys)?;
    if permutations == 0 {
        return Err(Error::validation("permutation count must be positive"));
    }
    let sigma = bandwidth(xs, ys, k)?;
    let statistic = mmd2_with(xs, ys, sigma);
    let pooled = concatenate![Axis(0), xs.view(), ys.view()];
    let n = xs.nrows();
    let mut idx: Vec<usize> = (0..pooled.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        let a = pooled.select(Axis(0), &idx[..n]);
        let b = pooled.select(Axis(0), &idx[n..]);
        null.push(mmd2_with(&a, &b, sigma));
    }
    let mean = null.iter().sum::<f64>() / permutations as f64;
    let var = null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / permutations.max(2).saturating_sub(1) as f64;
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        bandwidth: sigma,
        null_mean: mean,
        null_std: var.sqrt(),
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
    })
}
