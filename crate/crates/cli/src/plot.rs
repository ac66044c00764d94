//! Minimal line-chart rasterizer for the shift curve. No text; the CSV
//! carries the numbers.

use std::path::Path;

use anyhow::Context;
use dped::eval::ShiftCurve;
use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: i64 = 40;
const TICK: i64 = 5;
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
/// MSE in blue, color loss in red.
const SERIES: [Rgb<u8>; 2] = [Rgb([31, 90, 180]), Rgb([200, 40, 40])];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham with a 2x2 pen.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if thick {
            put(img, x0 + 1, y0, c);
            put(img, x0, y0 + 1, c);
            put(img, x0 + 1, y0 + 1, c);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

pub fn render(curve: &ShiftCurve, path: &Path) -> anyhow::Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN, W as i64 - MARGIN / 2, MARGIN / 2, H as i64 - MARGIN);
    let x_max = curve.shifts.last().copied().unwrap_or(1).max(1) as f64;
    let y_max = curve.mse.iter().chain(&curve.color).copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let to_px = |s: f64, v: f64| {
        let x = left as f64 + s / x_max * (right - left) as f64;
        let y = bottom as f64 - v / y_max * (bottom - top) as f64;
        (x.round() as i64, y.round() as i64)
    };

    for i in 1..=4 {
        let y = bottom - (bottom - top) * i / 4;
        line(&mut img, (left, y), (right, y), GRID, false);
        line(&mut img, (left - TICK, y), (left, y), AXIS, false);
    }
    for &s in &curve.shifts {
        let (x, _) = to_px(s as f64, 0.0);
        line(&mut img, (x, bottom), (x, bottom + TICK), AXIS, false);
    }
    line(&mut img, (left, top), (left, bottom), AXIS, false);
    line(&mut img, (left, bottom), (right, bottom), AXIS, false);

    for (values, color) in [&curve.mse, &curve.color].into_iter().zip(SERIES) {
        let pts: Vec<_> = curve.shifts.iter().zip(values).map(|(&s, &v)| to_px(s as f64, v)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color, true);
        }
    }
    img.save(path).with_context(|| format!("writing plot {}", path.display()))
}
