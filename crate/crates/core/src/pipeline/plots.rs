//! Plot data for a finished run: the input series with its labels, the
//! window scores placed at window ends, and a 2-D map of the embeddings.
//!
//! The embedding map is classical multidimensional scaling: squared pairwise
//! distances are double-centered and the top two eigenvectors, scaled by the
//! square roots of their eigenvalues, give coordinates whose distances best
//! preserve the originals in the least-squares sense.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use serde::Serialize;

use crate::boundary_rl::Pools;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::config::RunConfig;
use crate::pipeline::run::{prepare_data, score_set, stage_rng, RunManifest, CONFIG_COPY};
use crate::prototypes::{take_rows, PrototypeBank};
use crate::scoring::shift_for_plot;

pub const SERIES_PLOT: &str = "plot_series.csv";
pub const SCORES_PLOT: &str = "plot_scores.csv";
pub const PROJECTION_PLOT: &str = "plot_projection.csv";

/// Points drawn from each of the positive, negative and test sets.
pub const PROJECTION_SAMPLE: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct PlotFiles {
    pub series: PathBuf,
    pub scores: PathBuf,
    pub projection: PathBuf,
}

/// Everything written to the plot files, for renderers.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub files: PlotFiles,
    /// First dimension of the raw test series.
    pub series: Vec<f64>,
    pub point_labels: Option<Vec<u8>>,
    /// `(start + w, score)` pairs.
    pub scores: Vec<(usize, f64)>,
    pub threshold: f64,
    pub projection: Vec<ProjectedPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSet {
    Pos,
    Neg,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub set: PointSet,
    /// Window label, test points only.
    pub label: Option<u8>,
}

#[derive(Serialize)]
struct ScorePoint {
    x: usize,
    score: f64,
    threshold: f64,
    label: Option<u8>,
}

/// Writes the three plot CSVs into the run directory.
pub fn emit_plots(dir: &Path) -> Result<PlotData> {
    let manifest = RunManifest::load(dir)?;
    if manifest.completed_stage < 4 {
        return Err(Error::Checkpoint(format!(
            "run in {} has not been evaluated yet",
            dir.display()
        )));
    }
    let cfg = RunConfig::load(dir.join(CONFIG_COPY))?;
    let data = prepare_data(&cfg)?;
    let bank = PrototypeBank::<f64>::load(manifest.artifact(
        dir,
        &manifest.checkpoints.bank,
        "prototype bank",
    )?)?;
    let pools = Pools::<f64>::load(manifest.artifact(
        dir,
        &manifest.checkpoints.pools,
        "pool checkpoint",
    )?)?;
    let threshold = manifest
        .report
        .as_ref()
        .map(|r| r.threshold)
        .ok_or_else(|| Error::Checkpoint("manifest has no evaluation report".into()))?;

    let files = PlotFiles {
        series: dir.join(SERIES_PLOT),
        scores: dir.join(SCORES_PLOT),
        projection: dir.join(PROJECTION_PLOT),
    };

    let raw = &data.raw_test;
    let mut w = csv::Writer::from_path(&files.series)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..raw.dims()).map(|d| format!("value{d}")));
    header.push("label".into());
    w.write_record(&header)?;
    for t in 0..raw.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(raw.point(t).iter().map(|v| v.to_string()));
        rec.push(raw.labels().map_or_else(String::new, |l| l[t].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let scores = score_set(&bank, &data.test_windows)?;
    let shifted = shift_for_plot(&scores, cfg.window.width);
    let labels = data.test_windows.labels();
    let mut w = csv::Writer::from_path(&files.scores)?;
    for (i, (&x, &score)) in shifted.x.iter().zip(&shifted.scores).enumerate() {
        w.serialize(ScorePoint {
            x,
            score,
            threshold,
            label: labels.map(|l| l[i]),
        })?;
    }
    w.flush()?;

    let mut rng = stage_rng(cfg.seed, 5);
    let mut pick = |t: Tensor<f64>| -> Result<(Tensor<f64>, Vec<usize>)> {
        let n = t.shape()[0];
        let mut idx = sample(&mut rng, n, n.min(PROJECTION_SAMPLE)).into_vec();
        idx.sort_unstable();
        Ok((take_rows(&t, &idx)?, idx))
    };
    let (pos, _) = pick(pools.unique_positives()?)?;
    let (neg, _) = pick(pools.negatives_tensor()?)?;
    let (test, test_idx) = pick(data.test_windows.tensor().clone())?;
    let encoder = bank.encoder();
    let groups = [
        (PointSet::Pos, encoder.embed_batch(&pos)?),
        (PointSet::Neg, encoder.embed_batch(&neg)?),
        (PointSet::Test, encoder.embed_batch(&test)?),
    ];
    let dim = encoder.embed_dim();
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut tags = Vec::new();
    for (set, z) in &groups {
        for i in 0..z.shape()[0] {
            rows.push(&z.data()[i * dim..(i + 1) * dim]);
            let label = match set {
                PointSet::Test => labels.map(|l| l[test_idx[i]]),
                _ => None,
            };
            tags.push((*set, label));
        }
    }
    let projection: Vec<ProjectedPoint> = classical_mds(&rows)?
        .into_iter()
        .zip(tags)
        .map(|((x, y), (set, label))| ProjectedPoint { x, y, set, label })
        .collect();
    let mut w = csv::Writer::from_path(&files.projection)?;
    for p in &projection {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(PlotData {
        files,
        series: raw.column(0),
        point_labels: raw.labels().map(<[u8]>::to_vec),
        scores: shifted
            .x
            .iter()
            .copied()
            .zip(shifted.scores.iter().copied())
            .collect(),
        threshold,
        projection,
    })
}

/// Two-dimensional classical MDS of the given points.
pub fn classical_mds(points: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Empty("projection points"));
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        points[i]
            .iter()
            .zip(points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    });
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + total)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        match order.get(k) {
            Some(&c) => {
                let s = eig.eigenvalues[c].max(0.0).sqrt();
                eig.eigenvectors.column(c).iter().map(|v| v * s).collect()
            }
            None => vec![0.0; n],
        }
    };
    let (xs, ys) = (axis(0), axis(1));
    Ok(xs.into_iter().zip(ys).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    #[test]
    fn planar_points_keep_their_distances() {
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0, 0.0],
            vec![3.0, 0.0, 0.0],
            vec![0.0, 4.0, 0.0],
            vec![1.0, 1.0, 0.0],
        ];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let xy = classical_mds(&refs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let orig = refs[i]
                    .iter()
                    .zip(refs[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist(xy[i], xy[j]) - orig).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_point_maps_to_origin() {
        let p = [1.0, 2.0];
        assert_eq!(classical_mds(&[&p]).unwrap(), vec![(0.0, 0.0)]);
    }
}
