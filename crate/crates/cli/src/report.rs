//! Loss-curve and sample-grid images for a finished run.

use std::fs;
use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use serde::Serialize;
use smcyclegan::image::{Image, ValueRange};
use smcyclegan::training::{layout, read_metrics, StepReport};
use smcyclegan::Error;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 30;
const GAP: u32 = 2;

#[derive(Debug, Serialize)]
pub struct Summary {
    pub steps: usize,
    pub loss_curve_points: usize,
    pub series: Vec<&'static str>,
    pub sample_pairs: usize,
    pub last: StepReport,
}

type Series = (&'static str, fn(&StepReport) -> f64, Rgb<u8>);

const SERIES: [Series; 3] = [
    ("total", |r| r.total, Rgb([200, 40, 40])),
    ("loss_d_x", |r| r.loss_d_x, Rgb([40, 120, 200])),
    ("loss_d_y", |r| r.loss_d_y, Rgb([40, 160, 60])),
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plot every series against step; returns the number of points per series.
fn loss_curve(metrics: &[StepReport], path: &Path) -> Result<usize> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN as i64, (WIDTH - MARGIN) as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left, top), (left, bottom), axis);
    line(&mut img, (left, bottom), (right, bottom), axis);

    let values = metrics.iter().flat_map(|r| SERIES.iter().map(move |(_, f, _)| f(r)));
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = metrics.len();
    let to_px = |i: usize, v: f64| {
        let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let x = left + (fx * (right - left) as f64).round() as i64;
        let y = bottom - ((v - lo) / span * (bottom - top) as f64).round() as i64;
        (x, y)
    };
    for (_, f, color) in SERIES {
        let points: Vec<_> = metrics.iter().enumerate().map(|(i, r)| to_px(i, f(r))).collect();
        for w in points.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        if let [p] = points.as_slice() {
            line(&mut img, *p, *p, color);
        }
    }
    img.save(path).map_err(|source| Error::Codec { path: path.into(), source })?;
    Ok(n)
}

/// One row per sample: input on the left, translation on the right.
fn comparison_grid(samples_dir: &Path, path: &Path) -> Result<usize> {
    let mut pairs = Vec::new();
    for i in 0.. {
        let input = samples_dir.join(format!("input_{i:02}.png"));
        let output = samples_dir.join(format!("output_{i:02}.png"));
        if !(input.is_file() && output.is_file()) {
            break;
        }
        pairs.push((Image::load_png(&input, ValueRange::Unit)?, Image::load_png(&output, ValueRange::Unit)?));
    }
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Data(format!("no sample pairs in {}", samples_dir.display())).into());
    };
    let (h, w) = (first.height() as u32, first.width() as u32);
    let rows = pairs.len() as u32;
    let mut grid = RgbImage::from_pixel(2 * w + 3 * GAP, rows * (h + GAP) + GAP, Rgb([255, 255, 255]));
    for (row, (a, b)) in pairs.iter().enumerate() {
        for (col, img) in [a, b].into_iter().enumerate() {
            let (ox, oy) = (GAP + col as u32 * (w + GAP), GAP + row as u32 * (h + GAP));
            for y in 0..h.min(img.height() as u32) {
                for x in 0..w.min(img.width() as u32) {
                    let px = std::array::from_fn(|c| smcyclegan::image::quantize(img.get(y as usize, x as usize, c)));
                    grid.put_pixel(ox + x, oy + y, Rgb(px));
                }
            }
        }
    }
    grid.save(path).map_err(|source| Error::Codec { path: path.into(), source })?;
    Ok(pairs.len())
}

pub fn build(run_dir: &Path, report_dir: &Path) -> Result<Summary> {
    let metrics_path = run_dir.join(layout::METRICS);
    if !metrics_path.is_file() {
        return Err(Error::Data(format!("{} has no metrics log", run_dir.display())).into());
    }
    let metrics = read_metrics(&metrics_path)?;
    let Some(last) = metrics.last().copied() else {
        return Err(Error::Data("metrics log is empty".into()).into());
    };
    fs::create_dir_all(report_dir).map_err(|source| Error::Io { path: report_dir.into(), source })?;
    let points = loss_curve(&metrics, &report_dir.join("loss_curve.png"))?;
    let sample_pairs = comparison_grid(&run_dir.join(layout::SAMPLES), &report_dir.join("comparison_grid.png"))?;
    let summary = Summary {
        steps: metrics.len(),
        loss_curve_points: points,
        series: SERIES.iter().map(|s| s.0).collect(),
        sample_pairs,
        last,
    };
    let path = report_dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|source| Error::Io { path, source })?;
    Ok(summary)
}
