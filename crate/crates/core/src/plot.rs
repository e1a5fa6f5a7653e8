//! SVG figures: loss curves, confusion matrix, trajectory overlays and the
//! pseudo-label error histogram.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::pseudo_label::TrajectoryLabel;
use crate::train::{EvalRecord, EvalReport, MetricRow};

fn draw_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plotting failed: {e}"))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

pub fn loss_curves(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let e = |x| draw_err(path, x);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(e)?;
    let x_max = rows.last().map_or(1, |r| r.step.max(1)) as f64;
    let series: [(&str, fn(&MetricRow) -> f64, RGBColor); 4] = [
        ("L_total", |r| r.l_total, BLACK),
        ("L_cls", |r| r.l_cls, BLUE),
        ("L_pos", |r| r.l_pos, RED),
        ("L_ts", |r| r.l_ts, GREEN),
    ];
    let (lo, hi) = range(rows.iter().flat_map(|r| series.iter().map(move |s| (s.1)(r))));
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, lo.min(0.0)..hi)
        .map_err(e)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(e)?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.step as f64, f(r))), color))
            .map_err(e)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(e)?;
    root.present().map_err(e)
}

pub fn confusion_matrix(path: &Path, report: &EvalReport) -> Result<()> {
    let e = |x| draw_err(path, x);
    let k = report.confusion.len();
    let root = SVGBackend::new(path, (560, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(e)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("confusion ({}, Acc {:.1}%)", report.tag, report.acc), ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(40)
        .build_cartesian_2d(0..k, 0..k)
        .map_err(e)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("predicted")
        .y_desc("true")
        .draw()
        .map_err(e)?;
    for (t, row) in report.confusion.iter().enumerate() {
        let total = row.iter().sum::<usize>().max(1) as f64;
        for (p, &n) in row.iter().enumerate() {
            let shade = 1.0 - n as f64 / total;
            let c = RGBColor((40.0 + 215.0 * shade) as u8, (80.0 + 175.0 * shade) as u8, 255);
            chart
                .draw_series(std::iter::once(Rectangle::new([(p, t), (p + 1, t + 1)], c.filled())))
                .map_err(e)?;
            chart
                .draw_series(std::iter::once(Text::new(
                    n.to_string(),
                    (p, t + 1),
                    ("sans-serif", 16).into_font().color(&BLACK),
                )))
                .map_err(e)?;
        }
    }
    root.present().map_err(e)
}

/// Per-axis traces over time for one scene: truth, prediction and, when
/// given, pseudo-labels.
pub fn trajectory_overlay(path: &Path, scene: usize, records: &[EvalRecord], labels: &[TrajectoryLabel]) -> Result<()> {
    let e = |x| draw_err(path, x);
    let mut recs: Vec<&EvalRecord> = records.iter().filter(|r| r.scene == scene).collect();
    recs.sort_by_key(|r| r.frame);
    let labs: Vec<&TrajectoryLabel> = labels.iter().filter(|l| l.scene == scene).collect();
    if recs.is_empty() {
        return Err(Error::InvalidInput(format!("no predictions for scene {scene}")));
    }
    let root = SVGBackend::new(path, (900, 720)).into_drawing_area();
    root.fill(&WHITE).map_err(e)?;
    let panels = root.split_evenly((3, 1));
    let (t0, t1) = range(recs.iter().map(|r| r.timestamp));
    for (axis, area) in panels.iter().enumerate() {
        let name = ["x", "y", "z"][axis];
        let (lo, hi) = range(
            recs.iter()
                .flat_map(|r| [r.predicted()[axis], r.truth()[axis]])
                .chain(labs.iter().map(|l| l.position()[axis])),
        );
        let mut chart = ChartBuilder::on(area)
            .caption(format!("scene {scene}: {name}"), ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(25)
            .y_label_area_size(45)
            .build_cartesian_2d(t0..t1, lo..hi)
            .map_err(e)?;
        chart.configure_mesh().y_desc(format!("{name} (m)")).draw().map_err(e)?;
        chart
            .draw_series(LineSeries::new(recs.iter().map(|r| (r.timestamp, r.truth()[axis])), RED.stroke_width(2)))
            .map_err(e)?
            .label("truth")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], RED));
        chart
            .draw_series(LineSeries::new(recs.iter().map(|r| (r.timestamp, r.predicted()[axis])), BLUE))
            .map_err(e)?
            .label("predicted")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLUE));
        if !labs.is_empty() {
            chart
                .draw_series(labs.iter().map(|l| Circle::new((l.timestamp, l.position()[axis]), 3, GREEN.filled())))
                .map_err(e)?
                .label("pseudo-label")
                .legend(|(x, y)| Circle::new((x + 9, y), 3, GREEN.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(e)?;
    }
    root.present().map_err(e)
}

/// Histogram of pseudo-label errors in meters.
pub fn error_histogram(path: &Path, errors: &[f64], bins: usize) -> Result<()> {
    let e = |x| draw_err(path, x);
    let bins = bins.max(1);
    let top = errors.iter().cloned().fold(0.0, f64::max).max(1.0);
    let width = top / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in errors {
        counts[((x / width) as usize).min(bins - 1)] += 1;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(e)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("pseudo-label error", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..top, 0.0..(counts.iter().copied().max().unwrap_or(0).max(1) as f64 * 1.1))
        .map_err(e)?;
    chart.configure_mesh().x_desc("error (m)").y_desc("labels").draw().map_err(e)?;
    chart
        .draw_series(counts.iter().enumerate().map(|(i, &n)| {
            let x = i as f64 * width;
            Rectangle::new([(x, 0.0), (x + width, n as f64)], BLUE.mix(0.6).filled())
        }))
        .map_err(e)?;
    root.present().map_err(e)
}
