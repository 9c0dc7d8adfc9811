//! Static SVG plots: loss components and r(t) per run, per-group PCK bars.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{group_name, RankingTable, GROUPS};
use crate::train::RunRecord;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Loss components (top) and the distillation weight r(t) (bottom) per epoch.
pub fn plot_run(record: &RunRecord, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (top, bottom) = root.split_vertically(420);
    let epochs = record.epochs.len().max(1) as f64;

    let keys: Vec<String> = record
        .epochs
        .first()
        .map(|e| e.losses.keys().cloned().collect())
        .unwrap_or_default();
    let (lo, hi) = range_of(record.epochs.iter().flat_map(|e| e.losses.values().copied()));
    let mut chart = ChartBuilder::on(&top)
        .caption(format!("{}: loss components", record.name), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(1.0..epochs.max(2.0), lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (i, key) in keys.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<(f64, f64)> = record
            .epochs
            .iter()
            .filter_map(|e| e.losses.get(key).map(|v| (e.epoch as f64, *v)))
            .collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(key.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;

    let mut chart = ChartBuilder::on(&bottom)
        .caption("distillation weight r(t)", ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(1.0..epochs.max(2.0), 0.0..1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("r(t)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            record.epochs.iter().map(|e| (e.epoch as f64, e.r_t)),
            BLACK.stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Grouped bars of PCK@0.1 per part group, one bar per ranked run.
pub fn plot_group_pck(table: &RankingTable, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let runs = table.rows.len().max(1);
    let groups = GROUPS.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("PCK@0.1 per part group", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..groups as f64, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < GROUPS.len() {
                group_name(GROUPS[i]).to_string()
            } else {
                String::new()
            }
        })
        .y_desc("PCK@0.1")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / runs as f64;
    for (r, row) in table.rows.iter().enumerate() {
        let color = PALETTE[r % PALETTE.len()];
        let bars = GROUPS.iter().enumerate().map(move |(g, group)| {
            let x0 = g as f64 + 0.1 + r as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width, row.pck.get(*group))], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(row.name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
