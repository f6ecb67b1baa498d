//! Minimal raster plots. Each PNG gets a CSV sidecar with the plotted data;
//! anything that checks results reads the CSV, never the pixels.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Result, SadaError};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PlotStyle {
    Lines,
    Markers,
}

const WIDTH: u32 = 480;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 36;
const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

/// Path of the CSV written next to `png`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("csv")
}

/// Draws `series` into `path` and writes `series,x,y` rows to the sidecar.
/// Non-finite points are skipped in the PNG but kept in the CSV.
pub fn write_plot(path: &Path, series: &[Series], style: PlotStyle, x_label: &str, y_label: &str) -> Result<()> {
    let mut csv = csv::Writer::from_path(sidecar_path(path))?;
    csv.write_record(["series", x_label, y_label])?;
    for s in series {
        for (x, y) in &s.points {
            csv.write_record([s.name.as_str(), &x.to_string(), &y.to_string()])?;
        }
    }
    csv.flush().map_err(|e| SadaError::io(sidecar_path(path), e))?;

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let finite: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (x0, x1) = padded_range(finite.iter().map(|p| p.0));
    let (y0, y1) = padded_range(finite.iter().map(|p| p.1));
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN / 2) as f64);
    let (top, bottom) = ((MARGIN / 2) as f64, (HEIGHT - MARGIN) as f64);
    let to_px =
        |x: f64, y: f64| (left + (x - x0) / (x1 - x0) * (right - left), bottom - (y - y0) / (y1 - y0) * (bottom - top));
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let tx = left + f * (right - left);
        let ty = bottom - f * (bottom - top);
        line(&mut img, (tx, bottom), (tx, bottom + 4.0), axis);
        line(&mut img, (left - 4.0, ty), (left, ty), axis);
    }
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(f64, f64)> =
            s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| to_px(x, y)).collect();
        if style == PlotStyle::Lines {
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], color);
            }
        }
        for &p in &pts {
            marker(&mut img, p, color);
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Data range widened by 5% on each side; degenerate ranges get unit width.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, color);
    }
}

fn marker(img: &mut RgbImage, p: (f64, f64), color: Rgb<u8>) {
    let (cx, cy) = (p.0.round() as i64, p.1.round() as i64);
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, cx + dx, cy + dy, color);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_holds_every_point() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("p.png");
        let s = vec![
            Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] },
            Series { name: "b".into(), points: vec![(0.5, f64::NAN)] },
        ];
        write_plot(&png, &s, PlotStyle::Lines, "x", "y").unwrap();
        assert!(png.exists());
        let text = std::fs::read_to_string(sidecar_path(&png)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["series,x,y", "a,0,1", "a,1,2", "b,0.5,NaN"]);
    }

    #[test]
    fn single_point_and_empty_plots_render() {
        let dir = tempfile::tempdir().unwrap();
        let one = [Series { name: "p".into(), points: vec![(3.0, 3.0)] }];
        write_plot(&dir.path().join("one.png"), &one, PlotStyle::Markers, "x", "y").unwrap();
        write_plot(&dir.path().join("none.png"), &[], PlotStyle::Markers, "x", "y").unwrap();
    }
}
