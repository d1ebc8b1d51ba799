//! Traffic-matrix datasets: ingestion, normalization, masking, windowing and
//! the linear measurement model `Y = A·X`.

mod baseline;
mod csv_io;
mod measure;
mod normalize;
mod routing;
mod synth;
mod tensor;
mod window;

pub use baseline::baseline_interpolate;
pub use csv_io::{
    ingest_csv, read_dense_csv, read_link_loads_csv, read_mask_csv, read_routing_csv, write_dense_csv,
    write_mask_csv, write_trace_csv, CsvLayout,
};
pub use measure::{build_random_mask, link_loads};
pub use normalize::{apply_normalization, clip_and_normalize, denormalize, fit_normalization, percentile};
pub use routing::{od_pairs, shortest_path_routing, NetworkGraph, RoutingOptions};
pub use synth::{toy_topology, SyntheticTraffic};
pub use tensor::{LinkLoads, NormalizationParams, ObservationMask, RoutingMatrix, TrafficTensor, WindowBatch};
pub use window::{make_mask_windows, make_windows, train_test_split, window_origins};
