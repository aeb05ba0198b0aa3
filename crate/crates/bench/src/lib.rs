//! Experiment orchestration and benchmarks for `heston-forget`.
//!
//! - [`config`]: the small and large experiment presets.
//! - [`experiment`]: simulate, calibrate, build the cache, read/write run directories.
//! - [`sweep`]: forget-fraction sweep over the three deletion methods.
//! - [`locality`]: recompute cost against the number of touched shards.
//! - [`scaling`]: log-log cost slopes in dataset size, forget size and quadrature nodes.
//! - [`timing`]: single-thread pools, medians, per-call timing.

pub mod config;
pub mod experiment;
pub mod locality;
pub mod scaling;
pub mod sweep;
pub mod timing;

pub use config::{ConfigName, ExperimentConfig};
pub use experiment::{run_experiment, Experiment};
pub use locality::{shard_locality_study, LocalityRow, LocalityScenario};
pub use scaling::{scaling_study, ScalingConfig, ScalingResult, ScalingRow, ScalingSlopes};
pub use sweep::{bench_sweep, BenchConfig, BenchResult, BenchRow, BenchSample};
