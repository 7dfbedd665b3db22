//! SVG line charts: validation loss per epoch and test accuracy against
//! labelled-subset size on a log axis.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

use mdcpc::data::Split;
use mdcpc::training::{History, SweepResult};

pub type Series = Vec<(f64, f64)>;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Validation InfoNCE curves keyed by label.
pub fn loss_curves(runs: &[(String, &Path)]) -> Result<BTreeMap<String, Series>> {
    let mut out = BTreeMap::new();
    for (label, path) in runs {
        let h = History::read_csv(path)?;
        let s: Series = h
            .series(Split::Valid, "info_nce")
            .into_iter()
            .map(|(e, v)| (e as f64, v))
            .collect();
        if s.is_empty() {
            bail!("{} holds no validation info_nce rows", path.display());
        }
        out.insert(label.clone(), s);
    }
    Ok(out)
}

/// Mean test accuracy per subset size, one curve per variant.
pub fn accuracy_curves(sweep: &SweepResult) -> Result<BTreeMap<String, Series>> {
    if sweep.rows.is_empty() {
        bail!("sweep CSV has no rows");
    }
    let mut out: BTreeMap<String, Series> = BTreeMap::new();
    for a in sweep.aggregate() {
        out.entry(a.variant.to_string())
            .or_default()
            .push((a.subset_size as f64, a.mean));
    }
    Ok(out)
}

fn bounds(curves: &BTreeMap<String, Series>) -> Result<(f64, f64, f64, f64)> {
    let pts = curves.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        bail!("nothing to plot");
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    Ok((x0, x1, y0 - pad, y1 + pad))
}

fn draw<X>(path: &Path, title: &str, x_label: &str, y_label: &str, curves: &BTreeMap<String, Series>, x_axis: X) -> Result<()>
where
    X: plotters::coord::ranged1d::AsRangedCoord<Value = f64>,
    X::CoordDescType: plotters::coord::ranged1d::ValueFormatter<f64>,
{
    let (_, _, y0, y1) = bounds(curves)?;
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_axis, y0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (label, s)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(s.iter().map(|p| Circle::new(*p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

pub fn plot_losses(path: &Path, curves: &BTreeMap<String, Series>) -> Result<()> {
    let (x0, x1, _, _) = bounds(curves)?;
    draw(path, "Validation loss during CPC training", "epoch", "InfoNCE", curves, x0..x1)
}

pub fn plot_accuracy(path: &Path, curves: &BTreeMap<String, Series>) -> Result<()> {
    let (x0, x1, _, _) = bounds(curves)?;
    if x0 <= 0.0 {
        bail!("subset sizes must be positive for a log axis");
    }
    draw(
        path,
        "Mean test accuracy against labelled examples",
        "labelled training examples (log scale)",
        "test accuracy",
        curves,
        (x0 * 0.9..x1 * 1.1).log_scale(),
    )
}

/// Long-format CSV of the plotted points.
pub fn write_points(path: &Path, x_name: &str, curves: &BTreeMap<String, Series>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", x_name, "value"])?;
    for (label, s) in curves {
        for (x, y) in s {
            w.write_record([label.clone(), format!("{x}"), format!("{y:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
