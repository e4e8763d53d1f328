//! Harmonic (Laplace) fill of a rectangular region from its surroundings.

use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Pixel rectangle `(x, y, width, height)` in original image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl MaskRegion {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        MaskRegion { x, y, width, height }
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

const MAX_SWEEPS: usize = 5000;
const TOLERANCE: f64 = 1e-3;
const RELAXATION: f64 = 1.8;

/// Replaces the masked pixels with the solution of Laplace's equation whose
/// boundary values are the unmasked 4-neighbours. Solved by successive
/// over-relaxation in raster order, starting from the boundary mean.
/// The mask must fit inside the image.
pub fn harmonic_fill(img: &RgbImage, mask: MaskRegion) -> RgbImage {
    let (w, h) = img.dimensions();
    debug_assert!(mask.fits(w, h));
    let mut out = img.clone();
    if mask.width == 0 || mask.height == 0 {
        return out;
    }

    let neighbours = |x: u32, y: u32| {
        let mut n = Vec::with_capacity(4);
        if x > 0 {
            n.push((x - 1, y));
        }
        if x + 1 < w {
            n.push((x + 1, y));
        }
        if y > 0 {
            n.push((x, y - 1));
        }
        if y + 1 < h {
            n.push((x, y + 1));
        }
        n
    };

    // boundary mean over unmasked neighbours of masked pixels
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for y in mask.y..mask.y + mask.height {
        for x in mask.x..mask.x + mask.width {
            for (nx, ny) in neighbours(x, y) {
                if !mask.contains(nx, ny) {
                    let p = img.get_pixel(nx, ny);
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                    }
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        // mask covers the whole image: nothing to interpolate from
        return out;
    }
    let init = sum.map(|s| s / count as f64);

    let mw = mask.width as usize;
    let idx = |x: u32, y: u32| (y - mask.y) as usize * mw + (x - mask.x) as usize;
    let mut field = vec![init; mw * mask.height as usize];
    let value = |field: &[[f64; 3]], x: u32, y: u32, c: usize| {
        if mask.contains(x, y) {
            field[idx(x, y)][c]
        } else {
            img.get_pixel(x, y)[c] as f64
        }
    };

    for _ in 0..MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        for y in mask.y..mask.y + mask.height {
            for x in mask.x..mask.x + mask.width {
                let nb = neighbours(x, y);
                for c in 0..3 {
                    let avg = nb.iter().map(|&(nx, ny)| value(&field, nx, ny, c)).sum::<f64>()
                        / nb.len() as f64;
                    let cur = field[idx(x, y)][c];
                    let next = cur + RELAXATION * (avg - cur);
                    max_delta = max_delta.max((next - cur).abs());
                    field[idx(x, y)][c] = next;
                }
            }
        }
        if max_delta < TOLERANCE {
            break;
        }
    }

    for y in mask.y..mask.y + mask.height {
        for x in mask.x..mask.x + mask.width {
            let v = field[idx(x, y)];
            let px = out.get_pixel_mut(x, y);
            for c in 0..3 {
                px[c] = v[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
