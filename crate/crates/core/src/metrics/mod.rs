//! Estimation errors, temporal error series and distribution distances.

mod errors;
mod mmd;
mod report;

pub use errors::{aggregate_tre, nmae, nrmse, tre, Scope};
pub use mmd::{flatten_windows, median_bandwidth, mmd2, mmd2_permutation_test, KernelConfig, PermutationTest};
pub use report::{export_flat_samples, read_flat_samples, MetricReport};
