use ndarray::{Array2, Zip};

use crate::data::ObservationMask;
use crate::error::{ensure_shape, Error, Result};

/// Which entries an error metric is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum Scope<'a> {
    /// Entries the estimator did not see (`M = 0`).
    Unobserved(&'a ObservationMask),
    All,
}

impl Scope<'_> {
    fn includes(&self, i: usize, j: usize) -> bool {
        match self {
            Scope::Unobserved(m) => !m.is_observed(i, j),
            Scope::All => true,
        }
    }

    fn check(&self, shape: (usize, usize)) -> Result<()> {
        if let Scope::Unobserved(m) = self {
            ensure_shape(m.shape() == shape, || format!("mask {:?} vs data {:?}", m.shape(), shape))?;
        }
        Ok(())
    }
}

fn sums(x: &Array2<f64>, xhat: &Array2<f64>, scope: Scope, f: impl Fn(f64, f64) -> (f64, f64)) -> Result<(f64, f64)> {
    ensure_shape(x.dim() == xhat.dim(), || format!("truth {:?} vs estimate {:?}", x.dim(), xhat.dim()))?;
    scope.check(x.dim())?;
    let (mut num, mut den) = (0.0, 0.0);
    Zip::indexed(x).and(xhat).for_each(|(i, j), &a, &b| {
        if scope.includes(i, j) {
            let (n, d) = f(a, b);
            num += n;
            den += d;
        }
    });
    if den <= 0.0 {
        return Err(Error::validation("metric denominator is zero on the evaluated entries"));
    }
    Ok((num, den))
}

/// `Σ|X − X̂| / Σ|X|` over the evaluated entries.
pub fn nmae(x: &Array2<f64>, xhat: &Array2<f64>, scope: Scope) -> Result<f64> {
    let (num, den) = sums(x, xhat, scope, |a, b| ((a - b).abs(), a.abs()))?;
    Ok(num / den)
}

/// `√Σ(X − X̂)² / √ΣX²` over the evaluated entries.
pub fn nrmse(x: &Array2<f64>, xhat: &Array2<f64>, scope: Scope) -> Result<f64> {
    let (num, den) = sums(x, xhat, scope, |a, b| ((a - b) * (a - b), a * a))?;
    Ok(num.sqrt() / den.sqrt())
}

/// Per-slot `Σ_i|X(i,j) − X̂(i,j)| / Σ_i X(i,j)`; slots with zero traffic are `None`.
pub fn tre(x: &Array2<f64>, xhat: &Array2<f64>) -> Result<Vec<Option<f64>>> {
    ensure_shape(x.dim() == xhat.dim(), || format!("truth {:?} vs estimate {:?}", x.dim(), xhat.dim()))?;
    Ok(x.columns()
        .into_iter()
        .zip(xhat.columns())
        .map(|(c, h)| {
            let den: f64 = c.sum();
            (den > 0.0).then(|| c.iter().zip(h).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
        })
        .collect())
}

/// Means over consecutive groups of `group` slots, skipping missing slots.
/// A trailing short group is averaged over what it has.
pub fn aggregate_tre(values: &[Option<f64>], group: usize) -> Result<Vec<Option<f64>>> {
    if group == 0 {
        return Err(Error::validation("TRE group size must be positive"));
    }
    Ok(values
        .chunks(group)
        .map(|c| {
            let present: Vec<f64> = c.iter().flatten().copied().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect())
}
