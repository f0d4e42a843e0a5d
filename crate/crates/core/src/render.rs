//! Minimal PNG figures: slice montages, latent scatter plots and boxplots.
//! No text is drawn; legends live in the accompanying CSV/markdown files.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::VoxelGrid;
use crate::error::{invalid, Result};

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
pub const GRAY: Rgb<u8> = Rgb([200, 200, 200]);
/// Complete, cranial, facial.
pub const CLASS_COLORS: [Rgb<u8>; 3] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44])];

pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(width, height, WHITE),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
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

    pub fn disc(&mut self, cx: i64, cy: i64, r: i64, c: Rgb<u8>) {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y <= r * r {
                    self.put(cx + x, cy + y, c);
                }
            }
        }
    }

    pub fn ring(&mut self, cx: i64, cy: i64, r: i64, c: Rgb<u8>) {
        for y in -r..=r {
            for x in -r..=r {
                let d = x * x + y * y;
                if d <= r * r && d >= (r - 2) * (r - 2) {
                    self.put(cx + x, cy + y, c);
                }
            }
        }
    }

    pub fn arrow(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        self.line(x0, y0, x1, y1, c);
        let (dx, dy) = ((x1 - x0) as f64, (y1 - y0) as f64);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 1.0 {
            return;
        }
        let (ux, uy) = (dx / len, dy / len);
        for sign in [-1.0, 1.0] {
            let hx = x1 as f64 - 8.0 * ux + sign * 4.0 * uy;
            let hy = y1 as f64 - 8.0 * uy - sign * 4.0 * ux;
            self.line(x1, y1, hx.round() as i64, hy.round() as i64, c);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Axial (axis 0) or sagittal (axis 2) mid-slice as rows of occupancy.
fn mid_slice(grid: &VoxelGrid, axis: usize) -> Vec<Vec<f32>> {
    let [nd, nh, nw] = grid.dims();
    match axis {
        0 => (0..nh).map(|h| (0..nw).map(|w| grid.get(nd / 2, h, w)).collect()).collect(),
        // superior at the top, anterior to the right
        _ => (0..nd).rev().map(|d| (0..nh).map(|h| grid.get(d, h, nw / 2)).collect()).collect(),
    }
}

/// One row of axial mid-slices above one row of sagittal mid-slices, a
/// column per grid.
pub fn save_slice_montage(grids: &[VoxelGrid], path: &Path, scale: u32) -> Result<()> {
    let first = grids.first().ok_or_else(|| invalid("montage needs at least one grid"))?;
    let slices: Vec<[Vec<Vec<f32>>; 2]> = grids.iter().map(|g| [mid_slice(g, 0), mid_slice(g, 2)]).collect();
    let [nd, nh, nw] = first.dims();
    let (cell_w, cell_h) = ((nw.max(nh) as u32) * scale, (nh.max(nd) as u32) * scale);
    let gap = 4;
    let mut c = Canvas::new(grids.len() as u32 * (cell_w + gap) + gap, 2 * (cell_h + gap) + gap);
    for (col, pair) in slices.iter().enumerate() {
        for (row, slice) in pair.iter().enumerate() {
            let ox = (gap + col as u32 * (cell_w + gap)) as i64;
            let oy = (gap + row as u32 * (cell_h + gap)) as i64;
            for (y, line) in slice.iter().enumerate() {
                for (x, &v) in line.iter().enumerate() {
                    let g = 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    let px = Rgb([g, g, g]);
                    let (x0, y0) = (ox + (x as u32 * scale) as i64, oy + (y as u32 * scale) as i64);
                    c.fill_rect(x0, y0, x0 + scale as i64 - 1, y0 + scale as i64 - 1, px);
                }
            }
        }
    }
    c.save(path)
}

/// Scatter of 2-d points per class with ringed centroids and arrows from
/// the origin.
pub fn save_scatter(
    points: &[Vec<Vec<f64>>; 3],
    centroids: &[Vec<f64>; 3],
    arrows: &[(Vec<f64>, Rgb<u8>)],
    path: &Path,
) -> Result<()> {
    let size = 600i64;
    let margin = 40.0;
    let mut extent: f64 = 1e-9;
    for p in points.iter().flatten().chain(centroids.iter()).chain(arrows.iter().map(|(a, _)| a)) {
        extent = extent.max(p[0].abs()).max(p[1].abs());
    }
    extent *= 1.1;
    let to_px = |v: &[f64]| {
        let s = (size as f64 / 2.0 - margin) / extent;
        (
            (size as f64 / 2.0 + v[0] * s).round() as i64,
            (size as f64 / 2.0 - v[1] * s).round() as i64,
        )
    };
    let mut c = Canvas::new(size as u32, size as u32);
    c.line(0, size / 2, size, size / 2, GRAY);
    c.line(size / 2, 0, size / 2, size, GRAY);
    for (k, pts) in points.iter().enumerate() {
        for p in pts {
            let (x, y) = to_px(p);
            c.disc(x, y, 3, CLASS_COLORS[k]);
        }
    }
    for (k, cen) in centroids.iter().enumerate() {
        let (x, y) = to_px(cen);
        c.disc(x, y, 9, CLASS_COLORS[k]);
        c.ring(x, y, 10, BLACK);
    }
    for (a, color) in arrows {
        let (x0, y0) = to_px(&[0.0, 0.0]);
        let (x1, y1) = to_px(a);
        c.arrow(x0, y0, x1, y1, *color);
    }
    c.save(path)
}

pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> BoxStats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    BoxStats {
        min: v.first().copied().unwrap_or(f64::NAN),
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v.last().copied().unwrap_or(f64::NAN),
    }
}

/// Boxplots on a fixed [0, 1] axis with gridlines every 0.1.
pub fn save_boxplot(groups: &[(Vec<f64>, Rgb<u8>)], path: &Path) -> Result<()> {
    if groups.is_empty() {
        return Err(invalid("boxplot needs at least one group"));
    }
    let (w, h, margin) = (120 * groups.len() as i64 + 60, 400i64, 30i64);
    let y_of = |v: f64| margin + ((1.0 - v.clamp(0.0, 1.0)) * (h - 2 * margin) as f64).round() as i64;
    let mut c = Canvas::new(w as u32, h as u32);
    for k in 0..=10 {
        let y = y_of(k as f64 / 10.0);
        c.line(margin, y, w - margin, y, GRAY);
    }
    for (i, (values, color)) in groups.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let s = box_stats(values);
        let cx = 60 + 120 * i as i64;
        c.line(cx, y_of(s.min), cx, y_of(s.q1), BLACK);
        c.line(cx, y_of(s.q3), cx, y_of(s.max), BLACK);
        c.line(cx - 15, y_of(s.min), cx + 15, y_of(s.min), BLACK);
        c.line(cx - 15, y_of(s.max), cx + 15, y_of(s.max), BLACK);
        c.fill_rect(cx - 30, y_of(s.q3), cx + 30, y_of(s.q1), *color);
        c.line(cx - 30, y_of(s.median), cx + 30, y_of(s.median), BLACK);
    }
    c.save(path)
}
