//! Quartic corneal boundary curves fitted to column edge pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, PixelPoint};
use crate::preprocess::{self, ColumnEdgePair};

/// Default number of outlier-rejection passes.
pub const DEFAULT_OUTLIER_PASSES: usize = 1;
/// Residuals beyond this many MADs are rejected.
const MAD_CUTOFF: f64 = 3.0;
/// Lower bound on the MAD so exact data does not reject rounding noise.
const MAD_FLOOR: f64 = 1e-6;

/// `u(v) = Σ c_k v^k` over the column domain `[v_min, v_max]`.
///
/// The curve is evaluated through its centred and scaled form, which is how
/// it was fitted; [`Self::coefficients`] gives the equivalent raw monomial
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticCurve {
    coefficients: [f64; 5],
    center: f64,
    scale: f64,
    normalized: [f64; 5],
    v_min: usize,
    v_max: usize,
}

impl QuarticCurve {
    /// A curve from raw monomial coefficients.
    pub fn from_coefficients(coefficients: [f64; 5], v_min: usize, v_max: usize) -> Result<Self> {
        if v_min > v_max {
            return Err(Error::invalid(format!("empty domain [{v_min}, {v_max}]")));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coefficient"));
        }
        Ok(Self { coefficients, center: 0.0, scale: 1.0, normalized: coefficients, v_min, v_max })
    }

    fn from_normalized(normalized: [f64; 5], center: f64, scale: f64, v_min: usize, v_max: usize) -> Self {
        // u = Σ a_k ((v − m)/s)^k; expand each power binomially in v.
        let mut raw = [0.0; 5];
        for (k, &a) in normalized.iter().enumerate() {
            let ak = a / scale.powi(k as i32);
            for (j, r) in raw.iter_mut().enumerate().take(k + 1) {
                *r += ak * binomial(k, j) * (-center).powi((k - j) as i32);
            }
        }
        Self { coefficients: raw, center, scale, normalized, v_min, v_max }
    }

    pub fn coefficients(&self) -> [f64; 5] {
        self.coefficients
    }

    pub fn domain(&self) -> (usize, usize) {
        (self.v_min, self.v_max)
    }

    pub fn eval(&self, v: f64) -> f64 {
        let x = (v - self.center) / self.scale;
        self.normalized.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Upper (anterior) and bottom (posterior) corneal surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct CornealBoundary {
    pub upper: QuarticCurve,
    pub bottom: QuarticCurve,
}

/// Least-squares solution of `A x = b` for a tall `rows × 5` matrix via
/// Householder QR. `a` is row-major and consumed.
fn qr_solve(mut a: Vec<[f64; 5]>, mut b: Vec<f64>) -> Result<[f64; 5]> {
    let n = a.len();
    let mut diag = [0.0; 5];
    for k in 0..5 {
        let norm = a[k..].iter().map(|r| r[k] * r[k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Fit("rank-deficient design matrix".into()));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        // Householder vector v = x − alpha e_1, stored in column k below the diagonal.
        a[k][k] -= alpha;
        let vnorm2: f64 = a[k..].iter().map(|r| r[k] * r[k]).sum();
        for j in k + 1..5 {
            let dot: f64 = a[k..].iter().map(|r| r[k] * r[j]).sum();
            let f = 2.0 * dot / vnorm2;
            for r in a[k..].iter_mut() {
                r[j] -= f * r[k];
            }
        }
        let dot: f64 = a[k..].iter().zip(&b[k..]).map(|(r, y)| r[k] * y).sum();
        let f = 2.0 * dot / vnorm2;
        for (r, y) in a[k..].iter().zip(b[k..].iter_mut()) {
            *y -= f * r[k];
        }
        diag[k] = alpha;
    }
    let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if diag.iter().any(|d| d.abs() <= 1e-12 * scale) {
        return Err(Error::Fit("rank-deficient design matrix".into()));
    }
    let mut x = [0.0; 5];
    for k in (0..5).rev() {
        let s: f64 = (k + 1..5).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / diag[k];
    }
    debug_assert!(n >= 5);
    Ok(x)
}

fn distinct_columns(points: &[(f64, f64)]) -> usize {
    // Points are sorted by v.
    points.windows(2).filter(|w| w[0].0 != w[1].0).count() + usize::from(!points.is_empty())
}

fn fit_once(points: &[(f64, f64)], v_min: usize, v_max: usize) -> Result<QuarticCurve> {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let var = points.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let rows = points
        .iter()
        .map(|&(v, _)| {
            let x = (v - mean) / std;
            [1.0, x, x * x, x * x * x, x * x * x * x]
        })
        .collect();
    let b = points.iter().map(|p| p.1).collect();
    let a = qr_solve(rows, b)?;
    Ok(QuarticCurve::from_normalized(a, mean, std, v_min, v_max))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits `u = quartic(v)` by least squares on the normalised abscissa
/// `(v − mean) / std`, then for each of `outlier_passes` removes points whose
/// |residual| exceeds 3 × MAD of the residuals and refits. A pass that would
/// leave fewer than five distinct columns is not applied. The result does not
/// depend on the order of `points`; the domain spans the surviving columns.
pub fn fit_quartic(points: &[(usize, f64)], outlier_passes: usize) -> Result<QuarticCurve> {
    if let Some(p) = points.iter().find(|p| !p.1.is_finite()) {
        return Err(Error::Fit(format!("non-finite row at column {}", p.0)));
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|&(v, u)| (v as f64, u)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if pts.len() < 5 || distinct_columns(&pts) < 5 {
        return Err(Error::Fit(format!(
            "need at least 5 points in 5 distinct columns, got {} in {}",
            pts.len(),
            distinct_columns(&pts)
        )));
    }
    let domain = |p: &[(f64, f64)]| (p[0].0 as usize, p[p.len() - 1].0 as usize);
    let (lo, hi) = domain(&pts);
    let mut curve = fit_once(&pts, lo, hi)?;
    for _ in 0..outlier_passes {
        let residuals: Vec<f64> = pts.iter().map(|&(v, u)| u - curve.eval(v)).collect();
        let med = median(&mut residuals.clone());
        let mut dev: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
        let cutoff = MAD_CUTOFF * median(&mut dev).max(MAD_FLOOR);
        let kept: Vec<(f64, f64)> = pts.iter().zip(&residuals).filter(|(_, r)| r.abs() <= cutoff).map(|(p, _)| *p).collect();
        if kept.len() == pts.len() || kept.len() < 5 || distinct_columns(&kept) < 5 {
            break;
        }
        pts = kept;
        let (lo, hi) = domain(&pts);
        curve = fit_once(&pts, lo, hi)?;
    }
    Ok(curve)
}

/// Fits the upper curve to `(v, u_upper)` and the bottom curve to `(v, u_bottom)`.
pub fn fit_corneal_boundary(pairs: &[ColumnEdgePair], outlier_passes: usize) -> Result<CornealBoundary> {
    if pairs.len() < 5 {
        return Err(Error::Fit(format!("need at least 5 edge pairs, got {}", pairs.len())));
    }
    let upper: Vec<(usize, f64)> = pairs.iter().map(|p| (p.v, p.u_upper as f64)).collect();
    let bottom: Vec<(usize, f64)> = pairs.iter().map(|p| (p.v, p.u_bottom as f64)).collect();
    Ok(CornealBoundary { upper: fit_quartic(&upper, outlier_passes)?, bottom: fit_quartic(&bottom, outlier_passes)? })
}

/// Settings of the boundary detector: smoothing, edge selection and fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryParams {
    pub sigma: f64,
    pub rel_threshold: f64,
    pub outlier_passes: usize,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            sigma: preprocess::DEFAULT_SIGMA,
            rel_threshold: preprocess::DEFAULT_REL_THRESHOLD,
            outlier_passes: DEFAULT_OUTLIER_PASSES,
        }
    }
}

/// Smooths, takes the vertical gradient, collects column edge pairs and fits both curves.
pub fn detect_boundary(img: &GrayImage, params: &BoundaryParams) -> Result<CornealBoundary> {
    let smooth = preprocess::gaussian_smooth(img, params.sigma)?;
    let g = preprocess::vertical_gradient(&smooth)?;
    let pairs = preprocess::column_edge_pairs(&g, params.rel_threshold)?;
    fit_corneal_boundary(&pairs, params.outlier_passes)
}

/// Points at `v = v_min, v_min + stride, … ≤ v_max` with `u = round(curve(v))`
/// clamped into `0..rows`.
pub fn sample_boundary(curve: &QuarticCurve, stride: usize, rows: usize) -> Result<Vec<PixelPoint>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if rows == 0 {
        return Err(Error::invalid("image has no rows"));
    }
    let (lo, hi) = curve.domain();
    Ok((lo..=hi)
        .step_by(stride)
        .map(|v| {
            let u = curve.eval(v as f64).round().clamp(0.0, (rows - 1) as f64);
            PixelPoint::new(u as usize, v)
        })
        .collect())
}

/// Copy of `img` with both curves drawn at intensity 1 over their domains.
pub fn overlay_boundary(img: &GrayImage, boundary: &CornealBoundary) -> GrayImage {
    let mut data = img.data().to_vec();
    let (h, w) = (img.height(), img.width());
    for curve in [&boundary.upper, &boundary.bottom] {
        let (lo, hi) = curve.domain();
        for v in lo..=hi.min(w.saturating_sub(1)) {
            let u = curve.eval(v as f64).round();
            if u >= 0.0 && (u as usize) < h {
                data[u as usize * w + v] = 1.0;
            }
        }
    }
    GrayImage::new(h, w, data).expect("overlay keeps intensities in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_coefficients_reproduce_normalised_evaluation() {
        let pts: Vec<(usize, f64)> = (100..=500).step_by(20).map(|v| {
            let x = v as f64;
            (v, 50.0 + 0.3 * x - 1e-3 * x * x + 2e-6 * x.powi(3) - 1e-9 * x.powi(4))
        }).collect();
        let c = fit_quartic(&pts, 0).unwrap();
        let raw = c.coefficients();
        for &(v, u) in &pts {
            let x = v as f64;
            let direct: f64 = raw.iter().rev().fold(0.0, |acc, k| acc * x + k);
            assert!((direct - u).abs() < 1e-6 * u.abs().max(1.0));
            assert!((c.eval(x) - u).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_quadratic_is_interpolated() {
        let pts: Vec<(usize, f64)> = (0..6).map(|v| (v, 2.0 + (v * v) as f64)).collect();
        let c = fit_quartic(&pts, 1).unwrap();
        for &(v, u) in &pts {
            assert!((c.eval(v as f64) - u).abs() <= 1e-8);
        }
        let raw = c.coefficients();
        assert!((raw[0] - 2.0).abs() < 1e-8 && (raw[2] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn too_few_points_or_columns_is_an_error() {
        let four: Vec<(usize, f64)> = (0..4).map(|v| (v, 1.0)).collect();
        assert!(fit_quartic(&four, 1).is_err());
        let repeated: Vec<(usize, f64)> = (0..12).map(|i| (i % 4, i as f64)).collect();
        assert!(fit_quartic(&repeated, 1).is_err());
        assert!(fit_corneal_boundary(&[], 1).is_err());
    }

    #[test]
    fn sampling_counts_and_clamps() {
        let flat = QuarticCurve::from_coefficients([50.0, 0.0, 0.0, 0.0, 0.0], 0, 100).unwrap();
        let pts = sample_boundary(&flat, 10, 400).unwrap();
        assert_eq!(pts.len(), 11);
        assert!(pts.iter().all(|p| p.u == 50));
        assert_eq!(sample_boundary(&flat, 500, 400).unwrap(), vec![PixelPoint::new(50, 0)]);
        let low = QuarticCurve::from_coefficients([-5.0, 0.0, 0.0, 0.0, 0.0], 3, 4).unwrap();
        assert!(sample_boundary(&low, 1, 10).unwrap().iter().all(|p| p.u == 0));
        assert!(sample_boundary(&flat, 0, 10).is_err());
    }
}
