//! Configuration, stage orchestration, benchmark suites and plot data.

pub mod bench;
pub mod config;
pub mod plots;
pub mod run;
pub mod score;

pub use bench::{bench_run_dir, run_benchmark, BenchRow, BenchTable};
pub use config::{
    CsvConfig, DataConfig, EvalConfig, RunConfig, Stage1Config, Stage2Config, Stage3Config,
    SyntheticConfig, WindowConfig,
};
pub use plots::{classical_mds, emit_plots, PlotData, PlotFiles, PointSet, ProjectedPoint};
pub use run::{
    prepare_data, run_from, run_pipeline, score_set, stage_rng, PreparedData, RunManifest,
    LAST_STAGE,
};
pub use score::{score_csv, score_series, ScoredSeries};
