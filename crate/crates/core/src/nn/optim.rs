use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Adam moment estimates for every matrix of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Linear warmup to `peak`, then linear decay reaching zero after the last iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupLinearDecay {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl WarmupLinearDecay {
    /// Learning rate for 0-based iteration `i`.
    pub fn lr(&self, i: u64) -> f64 {
        let warmup = self.warmup.min(self.total);
        if i < warmup {
            self.peak * (i + 1) as f64 / warmup as f64
        } else if i >= self.total {
            0.0
        } else {
            self.peak * (self.total - i) as f64 / (self.total - warmup) as f64
        }
    }
}
