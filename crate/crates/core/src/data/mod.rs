//! Traffic series ingestion and preparation.

mod adjacency;
mod calendar;
mod dataset;
mod normalize;
mod series;
mod windows;

pub use adjacency::{build_adjacency, read_edges_csv, write_edges_csv, Edge, GraphPair, DEFAULT_THETA};
pub use calendar::{calendar_indices, steps_per_day, SECONDS_PER_DAY};
pub use dataset::{Dataset, DatasetConfig, SampleBatch};
pub use normalize::{zscore_fit_apply, NormStats, STD_FLOOR};
pub use series::TrafficSeries;
pub use windows::{make_windows, Split, SplitRatios, WindowSplits};
