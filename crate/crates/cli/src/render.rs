//! Static SVG overview: series with labeled points, score curve with the
//! threshold, and the embedding projection.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use tsad::pipeline::{PlotData, PointSet};

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

pub fn overview(data: &PlotData, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (1000, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let panels = root.split_evenly((3, 1));
    let n = data.series.len().max(1) as f64;

    let (lo, hi) = range(data.series.iter().copied());
    let mut chart = ChartBuilder::on(&panels[0])
        .caption("series", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(25)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..n, lo..hi)
        .map_err(|e| anyhow!("{e}"))?;
    chart.configure_mesh().draw().map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(LineSeries::new(
            data.series.iter().enumerate().map(|(t, &v)| (t as f64, v)),
            &BLUE,
        ))
        .map_err(|e| anyhow!("{e}"))?;
    if let Some(labels) = &data.point_labels {
        chart
            .draw_series(
                data.series
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| labels[*t] == 1)
                    .map(|(t, &v)| Circle::new((t as f64, v), 2, RED.filled())),
            )
            .map_err(|e| anyhow!("{e}"))?;
    }

    let (lo, hi) = range(data.scores.iter().map(|s| s.1).chain([data.threshold]));
    let mut chart = ChartBuilder::on(&panels[1])
        .caption("score (shifted by one window)", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(25)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..n, lo..hi)
        .map_err(|e| anyhow!("{e}"))?;
    chart.configure_mesh().draw().map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(LineSeries::new(
            data.scores.iter().map(|&(x, s)| (x as f64, s)),
            &BLACK,
        ))
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(LineSeries::new(
            [(0.0, data.threshold), (n, data.threshold)],
            &RED,
        ))
        .map_err(|e| anyhow!("{e}"))?;

    let (xlo, xhi) = range(data.projection.iter().map(|p| p.x));
    let (ylo, yhi) = range(data.projection.iter().map(|p| p.y));
    let mut chart = ChartBuilder::on(&panels[2])
        .caption(
            "embedding projection: pos blue, neg orange, test grey, test anomaly red",
            ("sans-serif", 18),
        )
        .margin(10)
        .x_label_area_size(25)
        .y_label_area_size(45)
        .build_cartesian_2d(xlo..xhi, ylo..yhi)
        .map_err(|e| anyhow!("{e}"))?;
    chart.configure_mesh().draw().map_err(|e| anyhow!("{e}"))?;
    let orange = RGBColor(230, 140, 20);
    let grey = RGBColor(150, 150, 150);
    chart
        .draw_series(data.projection.iter().map(|p| {
            let color = match (p.set, p.label) {
                (PointSet::Pos, _) => BLUE,
                (PointSet::Neg, _) => orange,
                (PointSet::Test, Some(1)) => RED,
                (PointSet::Test, _) => grey,
            };
            Circle::new((p.x, p.y), 2, color.filled())
        }))
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
