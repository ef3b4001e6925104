//! Static PNG figures: transfer curves, similarity bars, epoch sweeps.

use std::path::Path;
use std::sync::Once;

use anyhow::{anyhow, Result};
use plotters::element::ErrorBar;
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::experiment::SummaryRow;

const FONT: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
const SIZE: (u32, u32) = (900, 600);

fn fonts() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        assert!(
            register_font("sans-serif", FontStyle::Normal, FONT).is_ok(),
            "bundled font parses"
        );
    });
}

fn color(i: usize) -> RGBColor {
    const PALETTE: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    PALETTE[i % PALETTE.len()]
}

fn err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Padded `[lo, hi]` that contains every value.
fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.02);
    ((lo - pad).max(0.0), (hi + pad).min(1.0))
}

fn distinct<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Mean weighted AUROC against label fraction (log axis), one line per
/// initialization, with the mean bootstrap interval as error bars.
pub fn transfer_figure(path: &Path, mode: &str, rows: &[&SummaryRow]) -> Result<()> {
    fonts();
    let (fmin, fmax) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.fraction), b.max(r.fraction))
    });
    let (fmin, fmax) = (fmin / 1.5, fmax * 1.5);
    let (ylo, yhi) = y_range(rows.iter().flat_map(|r| [r.mean_q_low, r.mean_q_high, r.mean_point]));

    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("Weighted AUROC vs. label fraction ({mode})"),
            ("sans-serif", 24),
        )
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d((fmin..fmax).log_scale(), ylo..yhi)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("label fraction")
        .y_desc("weighted AUROC")
        .x_label_formatter(&|v| format!("{}%", (v * 100.0 * 1000.0).round() / 1000.0))
        .draw()
        .map_err(err)?;

    for (k, init) in distinct(rows.iter().map(|r| r.init.as_str())).into_iter().enumerate() {
        let c = color(k);
        let mut pts: Vec<&&SummaryRow> = rows.iter().filter(|r| r.init == init).collect();
        pts.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
        chart
            .draw_series(LineSeries::new(
                pts.iter().map(|r| (r.fraction, r.mean_median)),
                c.stroke_width(2),
            ))
            .map_err(err)?
            .label(init)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        chart
            .draw_series(
                pts.iter().map(|r| {
                    ErrorBar::new_vertical(r.fraction, r.mean_q_low, r.mean_median, r.mean_q_high, c.filled(), 8)
                }),
            )
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// One bar per dataset pair, grouped by layer.
pub fn similarity_figure(
    path: &Path,
    layers: &[String],
    pairs: &[String],
    score: impl Fn(&str, &str) -> f64,
) -> Result<()> {
    fonts();
    let groups = layers.len().max(1);
    let width = pairs.len().max(1) as f64;
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Pairwise CCA similarity by layer", ("sans-serif", 24))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..groups as f64, 0.0..1.05)
        .map_err(err)?;
    let names = layers.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups * 2 + 1)
        .x_label_formatter(&|v| {
            let frac = v - v.floor();
            if (frac - 0.5).abs() < 1e-6 {
                names.get(v.floor() as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("mean canonical correlation")
        .draw()
        .map_err(err)?;
    for (p, pair) in pairs.iter().enumerate() {
        let c = color(p);
        let bars = layers.iter().enumerate().map(|(g, layer)| {
            let x0 = g as f64 + 0.1 + 0.8 * p as f64 / width;
            let x1 = x0 + 0.8 / width;
            Rectangle::new([(x0, 0.0), (x1, score(layer, pair))], c.filled())
        });
        chart
            .draw_series(bars)
            .map_err(err)?
            .label(pair.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], c.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Test AUROC (solid) and final validation AUROC (dashed markers) against
/// end-to-end epochs, one color per initialization.
pub fn sweep_figure(path: &Path, rows: &[(String, usize, Option<f64>, Option<f64>)]) -> Result<()> {
    fonts();
    let emax = rows.iter().map(|r| r.1).max().unwrap_or(1) as f64;
    let (ylo, yhi) = y_range(rows.iter().flat_map(|r| [r.2, r.3]).flatten());
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("End-to-end finetuning vs. epochs", ("sans-serif", 24))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..emax * 1.05, ylo..yhi)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("epochs")
        .y_desc("weighted AUROC")
        .draw()
        .map_err(err)?;
    for (k, init) in distinct(rows.iter().map(|r| r.0.as_str())).into_iter().enumerate() {
        let c = color(k);
        let mut pts: Vec<_> = rows.iter().filter(|r| r.0 == init).collect();
        pts.sort_by_key(|r| r.1);
        let test: Vec<(f64, f64)> = pts.iter().filter_map(|r| r.3.map(|t| (r.1 as f64, t))).collect();
        chart
            .draw_series(LineSeries::new(test.clone(), c.stroke_width(2)))
            .map_err(err)?
            .label(format!("{init} (test)"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        chart
            .draw_series(test.iter().map(|&p| Circle::new(p, 4, c.filled())))
            .map_err(err)?;
        let val: Vec<(f64, f64)> = pts.iter().filter_map(|r| r.2.map(|v| (r.1 as f64, v))).collect();
        chart
            .draw_series(val.iter().map(|&p| TriangleMarker::new(p, 5, c.stroke_width(1))))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
