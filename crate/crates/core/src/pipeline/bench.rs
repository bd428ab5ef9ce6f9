//! Benchmark suites: one pipeline run per (anomaly kind, seed).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::AnomalyKind;
use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;
use crate::pipeline::run::run_pipeline;
use crate::scoring::EvalReport;

pub const BENCH_CSV: &str = "benchmark.csv";
pub const BENCH_JSON: &str = "benchmark.json";

/// One table row. Per-run rows carry the seed; aggregate rows have
/// `seed = None`, the mean AUC in `auc`, its sample standard deviation in
/// `auc_std`, and mean confusion counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: AnomalyKind,
    pub seed: Option<u64>,
    pub auc: f64,
    pub auc_std: Option<f64>,
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub predicted_anomalies: f64,
}

impl BenchRow {
    fn from_report(kind: AnomalyKind, seed: u64, r: &EvalReport) -> Self {
        Self {
            kind,
            seed: Some(seed),
            auc: r.auc,
            auc_std: None,
            tp: r.tp as f64,
            tn: r.tn as f64,
            fp: r.fp as f64,
            fn_: r.fn_ as f64,
            predicted_anomalies: r.predicted_anomalies as f64,
        }
    }

    fn aggregate(kind: AnomalyKind, rows: &[&BenchRow]) -> Self {
        let n = rows.len() as f64;
        let mean = |f: fn(&BenchRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let auc = mean(|r| r.auc);
        let var = if rows.len() > 1 {
            rows.iter().map(|r| (r.auc - auc).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            kind,
            seed: None,
            auc,
            auc_std: Some(var.sqrt()),
            tp: mean(|r| r.tp),
            tn: mean(|r| r.tn),
            fp: mean(|r| r.fp),
            fn_: mean(|r| r.fn_),
            predicted_anomalies: mean(|r| r.predicted_anomalies),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<BenchRow>,
}

impl BenchTable {
    pub fn aggregate(&self, kind: AnomalyKind) -> Option<&BenchRow> {
        self.aggregates.iter().find(|r| r.kind == kind)
    }
}

/// Run directory of one benchmark cell.
pub fn bench_run_dir(out: &Path, kind: AnomalyKind, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{kind}-seed{seed}"))
}

/// Runs the synthetic pipeline for every kind and seed and writes
/// `benchmark.csv` and `benchmark.json` under `out`.
pub fn run_benchmark(
    base: &RunConfig,
    kinds: &[AnomalyKind],
    seeds: &[u64],
    out: &Path,
) -> Result<BenchTable> {
    if kinds.is_empty() || seeds.is_empty() {
        return Err(Error::invalid(
            "benchmark needs at least one kind and one seed",
        ));
    }
    if base.data.synthetic.is_none() {
        return Err(Error::Config(
            "benchmarks run on the synthetic data source".into(),
        ));
    }
    let mut rows = Vec::with_capacity(kinds.len() * seeds.len());
    for &kind in kinds {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.output = bench_run_dir(out, kind, seed);
            if let Some(s) = cfg.data.synthetic.as_mut() {
                s.kind = kind;
            }
            log::info!("benchmark: {kind} seed {seed}");
            let manifest = run_pipeline(&cfg)?;
            let report = manifest.report.ok_or_else(|| {
                Error::Checkpoint(format!("run {} produced no report", cfg.output.display()))
            })?;
            rows.push(BenchRow::from_report(kind, seed, &report));
        }
    }
    let aggregates = kinds
        .iter()
        .map(|&k| BenchRow::aggregate(k, &rows.iter().filter(|r| r.kind == k).collect::<Vec<_>>()))
        .collect();
    let table = BenchTable { rows, aggregates };
    write_table(&table, out)?;
    Ok(table)
}

fn write_table(table: &BenchTable, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in table.rows.iter().chain(&table.aggregates) {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join(BENCH_CSV), &bytes)?;
    write_atomic(
        &out.join(BENCH_JSON),
        serde_json::to_string_pretty(table)?.as_bytes(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(kind: AnomalyKind, seed: u64, auc: f64) -> BenchRow {
        BenchRow {
            kind,
            seed: Some(seed),
            auc,
            auc_std: None,
            tp: 1.0,
            tn: 2.0,
            fp: 3.0,
            fn_: 4.0,
            predicted_anomalies: 4.0,
        }
    }

    #[test]
    fn aggregate_is_mean_and_sample_std() {
        let a = row(AnomalyKind::Seasonal, 0, 0.8);
        let b = row(AnomalyKind::Seasonal, 1, 1.0);
        let agg = BenchRow::aggregate(AnomalyKind::Seasonal, &[&a, &b]);
        assert!((agg.auc - 0.9).abs() < 1e-12);
        assert!((agg.auc_std.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.seed, None);
        assert_eq!(agg.tp, 1.0);
    }

    #[test]
    fn csv_has_table_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = row(AnomalyKind::Global, 3, 0.7);
        let table = BenchTable {
            aggregates: vec![BenchRow::aggregate(AnomalyKind::Global, &[&a])],
            rows: vec![a],
        };
        write_table(&table, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(BENCH_CSV)).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "kind,seed,auc,auc_std,tp,tn,fp,fn,predicted_anomalies"
        );
        assert_eq!(lines.count(), 2);
        let back: BenchTable =
            serde_json::from_slice(&std::fs::read(dir.path().join(BENCH_JSON)).unwrap()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn csv_source_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic = None;
        let err = run_benchmark(&cfg, &[AnomalyKind::Global], &[0], Path::new("/tmp/unused"))
            .unwrap_err();
        assert!(err.to_string().contains("synthetic"));
    }
}
