//! Histogram-of-oriented-gradients descriptor for ROI windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Descriptor layout. Defaults: 8-px cells, 2×2-cell blocks with a one-cell
/// stride, 9 unsigned orientation bins, `v / sqrt(‖v‖² + eps²)` block normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    pub cell: usize,
    pub block: usize,
    pub bins: usize,
    pub block_stride: usize,
    pub eps: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self { cell: 8, block: 2, bins: 9, block_stride: 1, eps: 1e-6 }
    }
}

impl HogConfig {
    fn validate(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.cell == 0 || self.block == 0 || self.bins == 0 || self.block_stride == 0 {
            return Err(Error::invalid("HOG cell, block, bins and block_stride must be positive"));
        }
        if !h.is_multiple_of(self.cell) || !w.is_multiple_of(self.cell) {
            return Err(Error::invalid(format!("window {h}x{w} is not divisible by cell size {}", self.cell)));
        }
        let (cy, cx) = (h / self.cell, w / self.cell);
        if self.block > cy || self.block > cx {
            return Err(Error::invalid(format!("block of {} cells exceeds the {cy}x{cx} cell grid", self.block)));
        }
        Ok((cy, cx))
    }

    /// Blocks along each axis for a window with `cells` cells on that axis.
    fn blocks_along(&self, cells: usize) -> usize {
        (cells - self.block) / self.block_stride + 1
    }

    /// Descriptor length for an `h × w` window.
    pub fn dim(&self, h: usize, w: usize) -> Result<usize> {
        let (cy, cx) = self.validate(h, w)?;
        Ok(self.blocks_along(cy) * self.blocks_along(cx) * self.block * self.block * self.bins)
    }
}

/// Per-pixel gradient magnitude and unsigned orientation in degrees `[0, 180)`,
/// by central differences with replicated borders.
pub fn pixel_gradients(window: &GrayImage) -> Vec<(f64, f64)> {
    let (h, w) = (window.height(), window.width());
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        let (up, down) = (window.row(u.saturating_sub(1)), window.row((u + 1).min(h - 1)));
        let row = window.row(u);
        for v in 0..w {
            let gx = row[(v + 1).min(w - 1)] - row[v.saturating_sub(1)];
            let gy = down[v] - up[v];
            let mag = (gx * gx + gy * gy).sqrt();
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            out.push((mag, angle));
        }
    }
    out
}

/// Bin centres sit at `b · 180/bins` degrees; a vote is split linearly
/// between the two nearest centres (wrapping at 180°).
pub fn orientation_votes(angle: f64, bins: usize) -> [(usize, f64); 2] {
    let width = 180.0 / bins as f64;
    let pos = angle / width;
    let lo = (pos.floor() as usize).min(bins - 1);
    let frac = (pos - lo as f64).clamp(0.0, 1.0);
    [(lo, 1.0 - frac), ((lo + 1) % bins, frac)]
}

/// Descriptor over a window. Blocks are emitted in raster order; within a
/// block, cells in raster order and bins in ascending order.
pub fn hog_descriptor(window: &GrayImage, cfg: &HogConfig) -> Result<Vec<f64>> {
    let (h, w) = (window.height(), window.width());
    let (cy, cx) = cfg.validate(h, w)?;
    let mut cells = vec![0.0; cy * cx * cfg.bins];
    for (i, (mag, angle)) in pixel_gradients(window).into_iter().enumerate() {
        if mag == 0.0 {
            continue;
        }
        let (u, v) = (i / w, i % w);
        let base = ((u / cfg.cell) * cx + v / cfg.cell) * cfg.bins;
        for (bin, weight) in orientation_votes(angle, cfg.bins) {
            cells[base + bin] += mag * weight;
        }
    }
    let (by, bx) = (cfg.blocks_along(cy), cfg.blocks_along(cx));
    let block_len = cfg.block * cfg.block * cfg.bins;
    let mut out = Vec::with_capacity(by * bx * block_len);
    for bu in 0..by {
        for bv in 0..bx {
            let start = out.len();
            for du in 0..cfg.block {
                for dv in 0..cfg.block {
                    let cell = (bu * cfg.block_stride + du) * cx + bv * cfg.block_stride + dv;
                    out.extend_from_slice(&cells[cell * cfg.bins..(cell + 1) * cfg.bins]);
                }
            }
            let block = &mut out[start..];
            let norm = (block.iter().map(|x| x * x).sum::<f64>() + cfg.eps * cfg.eps).sqrt();
            block.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(out)
}
