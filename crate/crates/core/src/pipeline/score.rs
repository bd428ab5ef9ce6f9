//! Applies a trained run to a new series.

use std::path::Path;

use crate::data::{load_csv, make_windows, CsvSchema, TimeSeries};
use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;
use crate::pipeline::run::{score_set, write_scores_csv, RunManifest, CONFIG_COPY};
use crate::prototypes::PrototypeBank;
use crate::scoring::{EvalReport, ScoreSeries};

pub struct ScoredSeries {
    pub scores: ScoreSeries,
    pub threshold: f64,
    /// Window labels and metrics, present when the input carries labels.
    pub labels: Option<Vec<u8>>,
    pub report: Option<EvalReport>,
}

/// Scores every window of `series` with the bank of the run in `dir`, using
/// that run's normalization, window geometry and threshold.
pub fn score_series(dir: &Path, series: &TimeSeries<f64>) -> Result<ScoredSeries> {
    let manifest = RunManifest::load(dir)?;
    let cfg = RunConfig::load(dir.join(CONFIG_COPY))?;
    let norm = manifest
        .norm
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("manifest lacks normalization statistics".into()))?;
    let threshold = manifest
        .report
        .as_ref()
        .map(|r| r.threshold)
        .ok_or_else(|| {
            Error::Checkpoint(format!(
                "run in {} has no threshold; finish it first",
                dir.display()
            ))
        })?;
    let bank = PrototypeBank::<f64>::load(manifest.artifact(
        dir,
        &manifest.checkpoints.bank,
        "prototype bank",
    )?)?;
    let windows = make_windows(&norm.apply(series)?, cfg.window.width, cfg.window.stride)?;
    let scores = score_set(&bank, &windows)?;
    let report = windows
        .labels()
        .map(|l| EvalReport::evaluate(&scores.scores, l, threshold))
        .transpose()?;
    Ok(ScoredSeries {
        scores,
        threshold,
        labels: windows.labels().map(<[u8]>::to_vec),
        report,
    })
}

/// Loads `input`, scores it and writes `start,score,label,prediction` rows
/// to `output`.
pub fn score_csv(
    dir: &Path,
    input: &Path,
    schema: &CsvSchema,
    output: &Path,
) -> Result<ScoredSeries> {
    let series = load_csv::<f64>(input, schema)?;
    let scored = score_series(dir, &series)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_scores_csv(
        output,
        &scored.scores,
        scored.labels.as_deref(),
        scored.threshold,
    )?;
    Ok(scored)
}
