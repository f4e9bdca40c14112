//! Minimal PNG rendering: image strips, line charts and box plots drawn
//! directly into an RGB buffer. No text; legends go in companion CSVs.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Images side by side on a shared grey-level window, upscaled so the
/// smaller side is at least 128 px.
pub fn image_row(images: &[ArrayView2<f32>], path: impl AsRef<Path>) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidParams("no images to render".into()));
    };
    let (h, w) = first.dim();
    if images.iter().any(|i| i.dim() != (h, w)) {
        return Err(Error::shape(format!("{h}x{w} images"), "mixed shapes"));
    }
    let (lo, hi) = images
        .iter()
        .flat_map(|i| i.iter())
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    let zoom = (128 / h.min(w)).max(1) as u32;
    let gap = 4u32;
    let n = images.len() as u32;
    let tw = n * w as u32 * zoom + (n - 1) * gap;
    let mut img = RgbImage::from_pixel(tw, h as u32 * zoom, Rgb([255, 255, 255]));
    for (k, im) in images.iter().enumerate() {
        let x0 = k as u32 * (w as u32 * zoom + gap);
        for ((i, j), &v) in im.indexed_iter() {
            let g = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
            for dy in 0..zoom {
                for dx in 0..zoom {
                    img.put_pixel(x0 + j as u32 * zoom + dx, i as u32 * zoom + dy, Rgb([g, g, g]));
                }
            }
        }
    }
    save(&img, path.as_ref())
}

pub struct Canvas {
    img: RgbImage,
    margin: u32,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    pub fn new(width: u32, height: u32, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let mut c = Self {
            img: RgbImage::from_pixel(width, height, Rgb([255, 255, 255])),
            margin: 24,
            x_range: pad(x_range),
            y_range: pad(y_range),
        };
        let (w, h, m) = (width as i64, height as i64, c.margin as i64);
        let axis = Rgb([0, 0, 0]);
        c.segment((m, h - m), (w - m, h - m), axis);
        c.segment((m, m), (m, h - m), axis);
        c
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (w, h, m) = (self.img.width() as f64, self.img.height() as f64, self.margin as f64);
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        ((m + fx * (w - 2.0 * m)).round() as i64, (h - m - fy * (h - 2.0 * m)).round() as i64)
    }

    fn segment(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
        let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
                self.img.put_pixel(x as u32, y as u32, c);
            }
            if (x, y) == b {
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

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (pa, pb) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        self.segment(pa, pb, c);
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(&self.img, path.as_ref())
    }
}

fn bounds<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite())
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// One polyline per series on shared axes.
pub fn line_chart(series: &[Vec<(f64, f64)>], path: impl AsRef<Path>) -> Result<()> {
    let xs = bounds(series.iter().flatten().map(|p| &p.0));
    let ys = bounds(series.iter().flatten().map(|p| &p.1));
    if xs.0 > xs.1 {
        return Err(Error::InvalidParams("nothing to plot".into()));
    }
    let mut c = Canvas::new(640, 400, xs, ys);
    for (i, s) in series.iter().enumerate() {
        c.polyline(s, color(i));
    }
    c.save(path)
}

/// Quartile box, median line and 1.5·IQR whiskers per group.
pub fn box_plot(groups: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let ys = bounds(groups.iter().flatten());
    if ys.0 > ys.1 {
        return Err(Error::InvalidParams("nothing to plot".into()));
    }
    let n = groups.len() as f64;
    let mut c = Canvas::new(120 + 100 * groups.len() as u32, 400, (0.0, n), ys);
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let q = crate::evalsim::quantiles(g);
        let col = color(i);
        let (l, r, mid) = (i as f64 + 0.25, i as f64 + 0.75, i as f64 + 0.5);
        for y in [q.q1, q.q3] {
            c.line((l, y), (r, y), col);
        }
        c.line((l, q.q1), (l, q.q3), col);
        c.line((r, q.q1), (r, q.q3), col);
        c.line((l, q.median), (r, q.median), Rgb([0, 0, 0]));
        c.line((mid, q.q3), (mid, q.whisker_hi), col);
        c.line((mid, q.q1), (mid, q.whisker_lo), col);
    }
    c.save(path)
}
