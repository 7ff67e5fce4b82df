//! Experiment matrix runner, statistics, latency benchmarks and telemetry
//! analysis.

pub mod analysis;
pub mod bench;
pub mod experiment;
pub mod selftest;
pub mod spec;
pub mod stats;

pub use analysis::{analyze_pmax_bins, analyze_raw, PmaxBin};
pub use bench::{bench_latency, BenchOptions, LatencyReport};
pub use experiment::{
    run_experiment, write_outputs, EpisodeRun, ExperimentOutput, RawEpisode, RunOptions, SummaryTable,
};
pub use spec::{ExperimentSpec, NamedStrategy};
