//! Sliding-window spur localisation along the corneal bottom boundary.
//!
//! Training windows are labelled with their normalised horizontal distance
//! to the scleral spur; detection picks the window with the smallest
//! regression score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cornea::{sample_boundary, CornealBoundary};
use crate::error::{Error, Result};
use crate::hog::{hog_descriptor, HogConfig};
use crate::image::{GrayImage, PixelPoint};
use crate::svr::{SvrModel, SvrTrainSet};

/// Window geometry and sweep settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcaConfig {
    /// Window width `W_r` in pixels.
    pub window_width: usize,
    pub window_height: usize,
    /// Column step between window centres.
    pub stride: usize,
    pub hog: HogConfig,
}

impl Default for AcaConfig {
    fn default() -> Self {
        Self { window_width: 120, window_height: 120, stride: 10, hog: HogConfig::default() }
    }
}

impl AcaConfig {
    fn validate(&self) -> Result<()> {
        if self.window_width < 2 || !self.window_width.is_multiple_of(2) || self.window_height == 0 {
            return Err(Error::invalid(format!(
                "window must be at least 2 px wide with even width, got {}x{}",
                self.window_height, self.window_width
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        self.hog.dim(self.window_height, self.window_width).map(|_| ())
    }

    pub fn descriptor_dim(&self) -> Result<usize> {
        self.hog.dim(self.window_height, self.window_width)
    }
}

/// A candidate region centred on the bottom boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiWindow {
    pub center: PixelPoint,
    pub width: usize,
    pub height: usize,
}

/// Winning window of a sweep together with every window's score.
#[derive(Debug, Clone, PartialEq)]
pub struct AcaDetection {
    pub ss_pred: PixelPoint,
    pub window: RoiWindow,
    pub score: f64,
    /// `(window centre, score)` in ascending column order.
    pub all_scores: Vec<(PixelPoint, f64)>,
}

/// `d = min(1, 2|v_r − v_s| / W_r)`.
pub fn distance_label(v_r: f64, v_s: f64, w_r: f64) -> Result<f64> {
    if !(w_r > 0.0) {
        return Err(Error::invalid(format!("window width must be positive, got {w_r}")));
    }
    Ok((2.0 * (v_r - v_s).abs() / w_r).min(1.0))
}

fn window_centers(img: &GrayImage, boundary: &CornealBoundary, cfg: &AcaConfig) -> Result<Vec<PixelPoint>> {
    cfg.validate()?;
    let (lo, hi) = boundary.bottom.domain();
    if lo >= img.width() {
        return Err(Error::invalid(format!("boundary domain [{lo}, {hi}] lies outside the image")));
    }
    let centers: Vec<PixelPoint> =
        sample_boundary(&boundary.bottom, cfg.stride, img.height())?.into_iter().filter(|p| p.v < img.width()).collect();
    if centers.is_empty() {
        return Err(Error::invalid("no usable boundary domain"));
    }
    Ok(centers)
}

fn descriptor_at(img: &GrayImage, center: PixelPoint, cfg: &AcaConfig) -> Result<Vec<f64>> {
    hog_descriptor(&img.crop(center, cfg.window_height, cfg.window_width), &cfg.hog)
}

/// HOG descriptors and distance labels for every window of the sweep, in
/// ascending column order.
pub fn make_training_windows(
    img: &GrayImage,
    boundary: &CornealBoundary,
    ss_truth: PixelPoint,
    cfg: &AcaConfig,
) -> Result<SvrTrainSet> {
    let centers = window_centers(img, boundary, cfg)?;
    let rows: Vec<Vec<f64>> = centers.par_iter().map(|&c| descriptor_at(img, c, cfg)).collect::<Result<_>>()?;
    let mut set = SvrTrainSet::new(cfg.descriptor_dim()?);
    for (c, x) in centers.iter().zip(rows) {
        set.push(&x, distance_label(c.v as f64, ss_truth.v as f64, cfg.window_width as f64)?)?;
    }
    Ok(set)
}

/// Picks the lowest-scoring window from `scored` (ascending column order);
/// ties go to the smaller column.
pub fn select_min(scored: Vec<(PixelPoint, f64)>, cfg: &AcaConfig) -> Result<AcaDetection> {
    let mut best: Option<(PixelPoint, f64)> = None;
    for &(c, s) in &scored {
        if !s.is_finite() {
            return Err(Error::invalid(format!("non-finite score at column {}", c.v)));
        }
        match best {
            Some((bc, bs)) if s > bs || (s == bs && c.v >= bc.v) => {}
            _ => best = Some((c, s)),
        }
    }
    let (center, score) = best.ok_or_else(|| Error::invalid("empty window set"))?;
    Ok(AcaDetection {
        ss_pred: center,
        window: RoiWindow { center, width: cfg.window_width, height: cfg.window_height },
        score,
        all_scores: scored,
    })
}

/// Scores every window with the model and returns the minimum.
pub fn detect_aca(img: &GrayImage, boundary: &CornealBoundary, model: &SvrModel, cfg: &AcaConfig) -> Result<AcaDetection> {
    let dim = cfg.descriptor_dim()?;
    if model.dim() != dim {
        return Err(Error::Dimension { expected: dim, got: model.dim() });
    }
    let centers = window_centers(img, boundary, cfg)?;
    let scored = centers
        .par_iter()
        .map(|&c| Ok((c, model.predict(&descriptor_at(img, c, cfg)?)?)))
        .collect::<Result<Vec<_>>>()?;
    select_min(scored, cfg)
}

/// The three classifier inputs before resizing.
#[derive(Debug, Clone, PartialEq)]
pub struct Levels {
    /// The whole image.
    pub global: GrayImage,
    /// Left half, columns `[0, width / 2)`.
    pub local: GrayImage,
    /// Window-sized crop centred at the detected spur.
    pub patch: GrayImage,
}

pub fn extract_levels(img: &GrayImage, ss_pred: PixelPoint, patch_size: usize) -> Result<Levels> {
    if !img.contains(ss_pred) {
        return Err(Error::invalid(format!("spur ({}, {}) outside the image", ss_pred.u, ss_pred.v)));
    }
    if img.width() < 2 {
        return Err(Error::invalid("image too narrow to halve"));
    }
    Ok(Levels {
        global: img.clone(),
        local: img.columns(0, img.width() / 2),
        patch: img.crop(ss_pred, patch_size, patch_size),
    })
}
