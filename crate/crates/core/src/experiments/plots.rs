//! Minimal PNG charts (no text) drawn from experiment results.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::class_color;
use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 24;

fn series_color(i: usize) -> Rgb<u8> {
    let c = class_color(i + 1);
    Rgb(c.map(|v| (v * 255.0).round() as u8))
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over a shared y range; non-finite points are
/// skipped.
pub fn line_plot(path: impl AsRef<Path>, series: &[Vec<f64>]) -> Result<()> {
    let mut img = canvas();
    let (lo, hi) = range(series.iter().flatten().copied());
    let max_len = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let to_px = |i: usize, v: f64| {
        (
            MARGIN as f64 + pw * i as f64 / (max_len - 1) as f64,
            (H - MARGIN) as f64 - ph * (v - lo) / (hi - lo),
        )
    };
    for (si, s) in series.iter().enumerate() {
        let c = series_color(si);
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                line(&mut img, to_px(i - 1, s[i - 1]), to_px(i, s[i]), c);
            }
        }
    }
    save(&img, path.as_ref())
}

/// One bar per value, baseline at the smaller of 0 and the minimum.
pub fn bar_plot(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut img = canvas();
    let (lo, hi) = range(values.iter().copied().chain(std::iter::once(0.0)));
    let n = values.len().max(1) as u32;
    let slot = (W - 2 * MARGIN) / n;
    let ph = (H - 2 * MARGIN) as f64;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let top = (H - MARGIN) as f64 - ph * (v - lo) / (hi - lo);
        let base = (H - MARGIN) as f64 - ph * (0.0f64.max(lo) - lo) / (hi - lo);
        let (y0, y1) = (top.min(base) as u32, top.max(base) as u32);
        let x0 = MARGIN + i as u32 * slot + slot / 6;
        for x in x0..x0 + (slot * 2 / 3).max(1) {
            for y in y0..=y1.min(H - 1) {
                img.put_pixel(x, y, series_color(i));
            }
        }
    }
    save(&img, path.as_ref())
}
