//! Small raster utilities over 8-bit single-channel images.

use image::GrayImage;
use serde::{Deserialize, Serialize};

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_max < width && self.y_max < height
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Tight box around all nonzero pixels.
pub fn tight_bbox(img: &GrayImage) -> Option<BBox> {
    let mut out: Option<BBox> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[0] == 0 {
            continue;
        }
        out = Some(match out {
            None => BBox::new(x, y, x, y),
            Some(b) => BBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    out
}

pub fn fill_rect(img: &mut GrayImage, b: BBox, value: u8) {
    let (w, h) = img.dimensions();
    for y in b.y_min..=b.y_max.min(h.saturating_sub(1)) {
        for x in b.x_min..=b.x_max.min(w.saturating_sub(1)) {
            img.put_pixel(x, y, image::Luma([value]));
        }
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Sets every pixel whose integer coordinate lies inside or on the boundary
/// of the convex polygon (counter-clockwise, as returned by [`convex_hull`]).
pub fn fill_convex_polygon(img: &mut GrayImage, hull: &[(f64, f64)], value: u8) {
    if hull.len() < 3 {
        return;
    }
    let (w, h) = img.dimensions();
    let min_x = hull.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as u32;
    let max_x = hull.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor();
    let min_y = hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as u32;
    let max_y = hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor();
    if max_x < 0.0 || max_y < 0.0 {
        return;
    }
    let max_x = (max_x as u32).min(w.saturating_sub(1));
    let max_y = (max_y as u32).min(h.saturating_sub(1));
    const EPS: f64 = 1e-9;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let p = (x as f64, y as f64);
            let inside = (0..hull.len()).all(|i| {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                cross(a, b, p) >= -EPS
            });
            if inside {
                img.put_pixel(x, y, image::Luma([value]));
            }
        }
    }
}

/// Bresenham segment, clipped to the image.
pub fn draw_line(img: &mut GrayImage, from: (i64, i64), to: (i64, i64), value: u8) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && x0 < w && y0 < h {
            img.put_pixel(x0 as u32, y0 as u32, image::Luma([value]));
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

/// Nearest-neighbour resize using pixel-center alignment.
pub fn resize_nearest(img: &GrayImage, width: u32, height: u32) -> GrayImage {
    let (sw, sh) = img.dimensions();
    if (sw, sh) == (width, height) {
        return img.clone();
    }
    let xs: Vec<u32> = (0..width)
        .map(|x| ((((x as f64 + 0.5) * sw as f64) / width as f64).floor() as u32).min(sw - 1))
        .collect();
    let ys: Vec<u32> = (0..height)
        .map(|y| ((((y as f64 + 0.5) * sh as f64) / height as f64).floor() as u32).min(sh - 1))
        .collect();
    GrayImage::from_fn(width, height, |x, y| *img.get_pixel(xs[x as usize], ys[y as usize]))
}

/// Square (Chebyshev) dilation of the nonzero support; output is {0,255}.
pub fn dilate(img: &GrayImage, radius: u32) -> GrayImage {
    let (w, h) = img.dimensions();
    let mut out = GrayImage::new(w, h);
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[0] == 0 {
            continue;
        }
        let b = BBox::new(
            x.saturating_sub(radius),
            y.saturating_sub(radius),
            (x + radius).min(w - 1),
            (y + radius).min(h - 1),
        );
        fill_rect(&mut out, b, 255);
    }
    out
}

pub fn count_nonzero(img: &GrayImage) -> usize {
    img.as_raw().iter().filter(|&&v| v != 0).count()
}
