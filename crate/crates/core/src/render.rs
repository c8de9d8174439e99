//! Binary PPM (P6) images: instance labelings, arrow fields and mask overlays.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labeling::InstanceLabeling;
use crate::tensor::Tensor;

/// Fixed label colors; id `k >= 1` uses entry `(k - 1) % 32`.
pub const PALETTE: [[u8; 3]; 32] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [115, 65, 10],
    [40, 90, 160],
    [200, 80, 120],
    [90, 200, 150],
    [180, 180, 40],
    [100, 60, 200],
    [240, 160, 100],
    [20, 200, 60],
    [200, 20, 20],
    [60, 60, 220],
    [160, 220, 240],
];

pub fn label_color(id: u16) -> [u8; 3] {
    if id == 0 {
        [0, 0, 0]
    } else {
        PALETTE[(id as usize - 1) % PALETTE.len()]
    }
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    /// Gray levels from values clamped to `[0, 1]`.
    pub fn from_gray(image: &Tensor) -> Result<Self> {
        let (h, w) = match image.shape() {
            &[1, h, w] | &[h, w] => (h, w),
            s => return Err(Error::invalid(format!("expected a gray image, got {s:?}"))),
        };
        let pixels = image
            .data()
            .iter()
            .map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g; 3]
            })
            .collect();
        Ok(RgbImage {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn from_labels(labels: &InstanceLabeling) -> Self {
        RgbImage {
            width: labels.width(),
            height: labels.height(),
            pixels: labels.labels().iter().map(|&l| label_color(l)).collect(),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    /// Bresenham segment; off-image points are skipped.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), color: [u8; 3]) {
        let (mut x, mut y) = from;
        let dx = (to.0 - x).abs();
        let dy = -(to.1 - y).abs();
        let sx = if x < to.0 { 1 } else { -1 };
        let sy = if y < to.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, color);
            if (x, y) == to {
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

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Arrows `u -> u + Φ^g_u` for instance pixels on a `stride` lattice, colored
/// by instance, over a dimmed copy of the labeling. Endpoints are marked white.
pub fn render_arrows(displacement: &Tensor, gt: &InstanceLabeling, stride: usize) -> Result<RgbImage> {
    let (h, w) = (gt.height(), gt.width());
    if displacement.shape() != [2, h, w] {
        return Err(Error::invalid(format!(
            "displacement {:?} does not match a {h}x{w} labeling",
            displacement.shape()
        )));
    }
    let stride = stride.max(1);
    let mut img = RgbImage::from_labels(gt);
    for px in &mut img.pixels {
        *px = px.map(|c| c / 4);
    }
    let plane = h * w;
    let d = displacement.data();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            let p = y * w + x;
            let id = gt.labels()[p];
            if id == 0 {
                continue;
            }
            let ex = (x as f64 + d[p]).round() as i64;
            let ey = (y as f64 + d[plane + p]).round() as i64;
            img.line((x as i64, y as i64), (ex, ey), label_color(id));
            img.set(ex, ey, [255, 255, 255]);
        }
    }
    Ok(img)
}

/// Gray image with each mask's pixels painted in the palette color of its
/// position in `masks`.
pub fn render_overlay(image: &Tensor, masks: &[Vec<usize>]) -> Result<RgbImage> {
    let mut img = RgbImage::from_gray(image)?;
    for (i, mask) in masks.iter().enumerate() {
        let color = label_color((i % PALETTE.len()) as u16 + 1);
        for &p in mask {
            if p >= img.pixels.len() {
                return Err(Error::invalid(format!("mask pixel {p} outside image")));
            }
            let g = img.pixels[p];
            img.pixels[p] = [0, 1, 2].map(|c| ((u16::from(g[c]) + u16::from(color[c])) / 2) as u8);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header() {
        let mut img = RgbImage::new(2, 1);
        img.set(1, 0, [1, 2, 3]);
        assert_eq!(img.to_ppm(), b"P6\n2 1\n255\n\0\0\0\x01\x02\x03".to_vec());
    }

    #[test]
    fn line_endpoints() {
        let mut img = RgbImage::new(5, 5);
        img.line((0, 0), (4, 2), [9, 9, 9]);
        assert_eq!(img.pixels[0], [9; 3]);
        assert_eq!(img.pixels[2 * 5 + 4], [9; 3]);
        assert_eq!(img.pixels.iter().filter(|p| **p == [9; 3]).count(), 5);
    }

    #[test]
    fn background_black() {
        assert_eq!(label_color(0), [0, 0, 0]);
        assert_eq!(label_color(33), PALETTE[0]);
    }
}
