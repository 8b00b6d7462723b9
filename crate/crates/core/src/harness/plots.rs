//! SVG figures with their underlying data written as CSV next to them.

use std::path::Path;

use plotters::prelude::*;

use super::{CorrelationPoint, LearningCurves};
use crate::error::{Error, Result};
use crate::metrics::{auroc, labelled, Curves};

const SIZE: (u32, u32) = (640, 480);
const IN_COLOR: RGBColor = RGBColor(31, 119, 180);
const OUT_COLOR: RGBColor = RGBColor(214, 39, 40);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn range(v: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.into_iter().filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    padded(lo, hi)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Bin counts of `v` over `bins` equal-width bins on `[lo, hi]`.
pub fn histogram(v: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &x in v.iter().filter(|x| x.is_finite()) {
        let b = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Overlaid score histograms of the in- and out-distribution test sides,
/// with the AUROC of the scores in the caption.
pub fn score_histogram(path: &Path, title: &str, x_desc: &str, in_scores: &[f64], out_scores: &[f64], bins: usize) -> Result<()> {
    let auroc = auroc(&labelled(in_scores, out_scores))?;
    let bins = bins.max(1);
    ensure_parent(path)?;
    let (lo, hi) = range(in_scores.iter().chain(out_scores).copied());
    let (hin, hout) = (histogram(in_scores, lo, hi, bins), histogram(out_scores, lo, hi, bins));
    let width = (hi - lo) / bins as f64;
    let mut csv = String::from("bin_lo,bin_hi,count_in,count_out\n");
    for b in 0..bins {
        csv.push_str(&format!("{},{},{},{}\n", lo + b as f64 * width, lo + (b + 1) as f64 * width, hin[b], hout[b]));
    }
    std::fs::write(path.with_extension("csv"), csv)?;

    let ymax = hin.iter().chain(&hout).copied().max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title} (AUROC {auroc:.3})"), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(lo..hi, 0usize..ymax + 1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc("count").draw().map_err(plot_err)?;
    for (counts, color, label) in [(&hin, IN_COLOR, "in"), (&hout, OUT_COLOR, "out")] {
        chart
            .draw_series(counts.iter().enumerate().map(|(b, &c)| {
                let x0 = lo + b as f64 * width;
                Rectangle::new([(x0, 0), (x0 + width, c)], color.mix(0.45).filled())
            }))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.mix(0.45).filled()));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// ROC and precision-recall curves of several indicators on one pair, side
/// by side, with the chance diagonal on the ROC panel.
pub fn roc_pr(path: &Path, title: &str, curves: &[(String, Curves)]) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::precondition("no curves to plot"));
    }
    ensure_parent(path)?;
    let mut csv = String::from("indicator,curve,x,y\n");
    for (name, c) in curves {
        for (kind, pts) in [("roc", &c.roc), ("pr", &c.pr)] {
            for (x, y) in pts.iter() {
                csv.push_str(&format!("{name},{kind},{x},{y}\n"));
            }
        }
    }
    std::fs::write(path.with_extension("csv"), csv)?;

    let root = SVGBackend::new(path, (SIZE.0 * 2, SIZE.1)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 18)).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(SIZE.0);
    for (panel, area, xd, yd) in [(0, left, "false positive rate", "true positive rate"), (1, right, "recall", "precision")] {
        let mut chart = ChartBuilder::on(&area)
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(xd).y_desc(yd).draw().map_err(plot_err)?;
        if panel == 0 {
            chart.draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.4))).map_err(plot_err)?;
        }
        for (k, (name, c)) in curves.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let pts = if panel == 0 { &c.roc } else { &c.pr };
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().position(SeriesLabelPosition::LowerRight).border_style(BLACK).draw().map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// AUROC per fine-tuning epoch (epoch 0 is before any step), pretrained
/// against from-scratch.
pub fn learning_curves(path: &Path, curves: &LearningCurves) -> Result<()> {
    ensure_parent(path)?;
    let mut csv = String::from("epoch,auroc_pretrained,auroc_unpretrained\n");
    for (e, (p, u)) in curves.pretrained.iter().zip(&curves.unpretrained).enumerate() {
        csv.push_str(&format!("{e},{p},{u}\n"));
    }
    std::fs::write(path.with_extension("csv"), csv)?;

    let n = curves.pretrained.len().max(curves.unpretrained.len()).max(2);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({})", curves.pair, curves.family), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..(n - 1) as f64, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("AUROC").draw().map_err(plot_err)?;
    for (v, color, label) in [(&curves.pretrained, IN_COLOR, "pretrained"), (&curves.unpretrained, OUT_COLOR, "from scratch")] {
        chart
            .draw_series(LineSeries::new(v.iter().enumerate().map(|(e, &a)| (e as f64, a)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Model log-likelihood against compressed size, one color per dataset,
/// with Pearson r over all points in the caption.
pub fn correlation(path: &Path, title: &str, points: &[CorrelationPoint]) -> Result<()> {
    ensure_parent(path)?;
    let mut csv = String::from("dataset,sample_id,loglik_bits_per_dim,complexity_bits_per_dim\n");
    for p in points {
        csv.push_str(&format!("{},{},{},{}\n", p.dataset, p.sample_id, p.loglik_bits_per_dim, p.complexity_bits_per_dim));
    }
    std::fs::write(path.with_extension("csv"), csv)?;

    let xs: Vec<f64> = points.iter().map(|p| p.complexity_bits_per_dim).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.loglik_bits_per_dim).collect();
    let r = pearson(&xs, &ys);
    let xr = range(points.iter().map(|p| p.complexity_bits_per_dim));
    let yr = range(points.iter().map(|p| p.loglik_bits_per_dim));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title} (r = {r:.3}, n = {})", points.len()), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("compressed bits/dim").y_desc("log-likelihood bits/dim").draw().map_err(plot_err)?;
    let mut names: Vec<&str> = points.iter().map(|p| p.dataset.as_str()).collect();
    names.sort();
    names.dedup();
    for (k, name) in names.into_iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(
                points
                    .iter()
                    .filter(|p| p.dataset == name)
                    .map(|p| Circle::new((p.complexity_bits_per_dim, p.loglik_bits_per_dim), 3, color.filled())),
            )
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| Circle::new((x + 5, y), 3, color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}
