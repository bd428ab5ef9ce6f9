//! Series ingestion, normalization, windowing, synthetic benchmarks and
//! augmentation.

pub mod augment;
pub mod series;
pub mod synth;
pub mod window;

pub use augment::{augment_batch, augment_light, AugmentConfig};
pub use series::{load_csv, normalize, CsvSchema, NormStats, TimeSeries};
pub use synth::{
    default_magnitude, generate_synthetic, make_benchmark, AnomalyKind, AnomalySpec, BaseSignal,
    Benchmark, BenchmarkSpec,
};
pub use window::{make_windows, WindowSet};
