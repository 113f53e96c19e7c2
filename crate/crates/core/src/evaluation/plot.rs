//! Minimal line plots written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [127, 127, 127],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Plots each `(x, y)` series on shared axes with a light frame. Axis
/// ranges cover all finite points.
pub fn line_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmin > xmax {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax - xmin < 1e-12 {
        xmax = xmin + 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            left + (x - xmin) / (xmax - xmin) * (right - left),
            bottom - (y - ymin) / (ymax - ymin) * (bottom - top),
        )
    };
    let axis = Rgb([160, 160, 160]);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let finite: Vec<_> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        for w in finite.windows(2) {
            draw_line(&mut img, to_px(w[0]), to_px(w[1]), color);
        }
        if let [only] = finite.as_slice() {
            let (x, y) = to_px(*only);
            draw_line(&mut img, (x - 2.0, y), (x + 2.0, y), color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Loss against step, one series per named component.
pub fn loss_curve_png(path: &Path, series: &[(&str, Vec<f64>)]) -> Result<()> {
    let lines: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, ys)| ys.iter().enumerate().map(|(i, &y)| ((i + 1) as f64, y)).collect())
        .collect();
    line_plot(path, &lines)
}

/// ROC curve with the chance diagonal.
pub fn roc_curve_png(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    line_plot(path, &[points.to_vec(), vec![(0.0, 0.0), (1.0, 1.0)]])
}
