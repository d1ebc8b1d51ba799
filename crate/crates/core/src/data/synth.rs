//! Synthetic diurnal traffic on small networks, for desk-scale benchmarks.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::routing::NetworkGraph;
use super::tensor::TrafficTensor;
use crate::error::{Error, Result};

/// Gravity-model traffic with a per-flow diurnal cycle and multiplicative noise.
///
/// `x_od(t) = base · g_o · g_d · (1 + amplitude · sin(2πt / period + φ_od)) · (1 + noise · ε)`,
/// clamped at 0. Flows are all ordered pairs including self-pairs, origin-major,
/// so a `K`-node network yields `K²` flows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTraffic {
    pub nodes: usize,
    pub slots: usize,
    pub period: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub base: f64,
    pub seed: u64,
}

impl Default for SyntheticTraffic {
    fn default() -> Self {
        Self {
            nodes: 6,
            slots: 3672,
            period: 48.0,
            amplitude: 0.6,
            noise: 0.1,
            base: 1.0e6,
            seed: 7,
        }
    }
}

impl SyntheticTraffic {
    pub fn generate(&self) -> Result<TrafficTensor> {
        if self.nodes == 0 || self.slots == 0 || self.period <= 0.0 {
            return Err(Error::validation("synthetic traffic needs nodes, slots and period > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let gravity = LogNormal::new(0.0, 0.6).expect("valid lognormal");
        let weights: Vec<f64> = (0..self.nodes).map(|_| gravity.sample(&mut rng)).collect();
        let phases: Vec<f64> = (0..self.nodes).map(|_| rng.random_range(0.0..PI)).collect();

        let flows = self.nodes * self.nodes;
        let mut values = Array2::zeros((flows, self.slots));
        for o in 0..self.nodes {
            for d in 0..self.nodes {
                let f = o * self.nodes + d;
                let level = self.base * weights[o] * weights[d];
                let phase = 0.5 * (phases[o] + phases[d]);
                for t in 0..self.slots {
                    let cycle = 1.0 + self.amplitude * (2.0 * PI * t as f64 / self.period + phase).sin();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    values[[f, t]] = (level * cycle * (1.0 + self.noise * eps)).max(0.0);
                }
            }
        }
        TrafficTensor::new(values)
    }
}

/// Six routers on a ring with two chords (8 bidirectional edges, 16 directed links).
pub fn toy_topology() -> NetworkGraph {
    NetworkGraph::unit(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3), (1, 4)])
        .expect("static topology is valid")
}
