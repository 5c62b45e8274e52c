//! Speckle smoothing, vertical gradient map and per-column edge candidates.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Default Gaussian σ in pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Default fraction of the global maximum |G| an edge must reach.
pub const DEFAULT_REL_THRESHOLD: f64 = 0.05;

/// Signed vertical gradient, same shape as the source; first and last rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GradientMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.width + v]
    }

    /// Builds a map from raw values (used by tests and debug tooling).
    pub fn from_values(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension { expected: height * width, got: data.len() });
        }
        Ok(Self { height, width, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Affine map of `[min, max]` onto `[0, 1]` for visualisation.
    pub fn to_image(&self) -> GrayImage {
        let (lo, hi) = self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let span = hi - lo;
        let data = self.data.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect();
        GrayImage::new(self.height, self.width, data).expect("normalised values lie in [0, 1]")
    }
}

/// The strongest negative (upper) and positive (bottom) responses of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnEdgePair {
    pub v: usize,
    pub u_upper: usize,
    pub u_bottom: usize,
    pub mag_upper: f64,
    pub mag_bottom: f64,
}

/// Normalised 1-D Gaussian taps for offsets `−r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Half-sample symmetric reflection (`… b a | a b c … z | z y …`), folded
/// repeatedly so any offset maps into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflect padding; the output stays in `[0, 1]`.
pub fn gaussian_smooth(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let taps = gaussian_kernel(sigma)?;
    let r = (taps.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Ok(img.clone());
    }
    // Horizontal pass, one row at a time.
    let mut tmp = vec![0.0; h * w];
    tmp.par_chunks_mut(w).enumerate().for_each(|(u, out)| {
        let row = img.row(u);
        for (v, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[reflect(v as isize + k as isize - r, w)];
            }
            *o = acc;
        }
    });
    // Vertical pass: accumulate whole rows for contiguous access.
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(u, dst)| {
        for (k, t) in taps.iter().enumerate() {
            let src = reflect(u as isize + k as isize - r, h);
            for (d, s) in dst.iter_mut().zip(&tmp[src * w..(src + 1) * w]) {
                *d += t * s;
            }
        }
    });
    Ok(GrayImage::from_clamped(h, w, out))
}

/// `G(u, v) = I(u−1, v) − I(u+1, v)` on interior rows, zero on the first and
/// last rows. Entering a bright band from above gives a negative response.
pub fn vertical_gradient(img: &GrayImage) -> Result<GradientMap> {
    let (h, w) = (img.height(), img.width());
    if h < 3 {
        return Err(Error::invalid(format!("vertical gradient needs height >= 3, got {h}")));
    }
    let mut data = vec![0.0; h * w];
    for u in 1..h - 1 {
        let (above, below) = (img.row(u - 1), img.row(u + 1));
        for (d, (a, b)) in data[u * w..(u + 1) * w].iter_mut().zip(above.iter().zip(below)) {
            *d = a - b;
        }
    }
    Ok(GradientMap { height: h, width: w, data })
}

/// Per column: `u_upper = argmin G`, `u_bottom = argmax G` (ties to the
/// smaller row). A column is kept only when `u_upper < u_bottom` and both
/// magnitudes reach `rel_threshold` times the global maximum |G|.
pub fn column_edge_pairs(g: &GradientMap, rel_threshold: f64) -> Result<Vec<ColumnEdgePair>> {
    if !(0.0..1.0).contains(&rel_threshold) {
        return Err(Error::invalid(format!("rel_threshold must lie in [0, 1), got {rel_threshold}")));
    }
    let global = g.max_abs();
    if global == 0.0 {
        return Ok(Vec::new());
    }
    let floor = rel_threshold * global;
    let pairs = (0..g.width)
        .filter_map(|v| {
            let (mut u_min, mut u_max) = (0, 0);
            for u in 1..g.height {
                let x = g.get(u, v);
                if x < g.get(u_min, v) {
                    u_min = u;
                }
                if x > g.get(u_max, v) {
                    u_max = u;
                }
            }
            let pair = ColumnEdgePair {
                v,
                u_upper: u_min,
                u_bottom: u_max,
                mag_upper: -g.get(u_min, v),
                mag_bottom: g.get(u_max, v),
            };
            let strong = pair.mag_upper >= floor && pair.mag_bottom >= floor && pair.mag_upper > 0.0 && pair.mag_bottom > 0.0;
            (u_min < u_max && strong).then_some(pair)
        })
        .collect();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_with_radius_three_sigma() {
        let k = gaussian_kernel(2.0).unwrap();
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.5).unwrap().len(), 5);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn reflect_folds_half_sample_symmetric() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = GrayImage::from_fn(9, 14, |_, _| 0.37);
        let s = gaussian_smooth(&img, 2.0).unwrap();
        assert!(s.data().iter().all(|x| (x - 0.37).abs() < 1e-12));
    }

    #[test]
    fn gradient_of_step_column() {
        let img = GrayImage::new(4, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let g = vertical_gradient(&img).unwrap();
        assert_eq!(g.data(), &[0.0, -1.0, -1.0, 0.0]);
        assert!(vertical_gradient(&GrayImage::zeros(2, 5)).is_err());
    }

    #[test]
    fn edge_pairs_follow_definition() {
        let (h, w) = (40, 3);
        let mut data = vec![0.0; h * w];
        data[10 * w] = -0.9;
        data[30 * w] = 0.8;
        // Column 1: positive above negative, must be skipped.
        data[5 * w + 1] = 0.7;
        data[20 * w + 1] = -0.7;
        let g = GradientMap::from_values(h, w, data).unwrap();
        let pairs = column_edge_pairs(&g, 0.05).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].v, pairs[0].u_upper, pairs[0].u_bottom), (0, 10, 30));
        let zero = GradientMap::from_values(5, 5, vec![0.0; 25]).unwrap();
        assert!(column_edge_pairs(&zero, 0.05).unwrap().is_empty());
        assert!(column_edge_pairs(&g, 1.0).is_err());
    }

    #[test]
    fn ties_pick_the_smaller_row() {
        let mut data = vec![0.0; 10];
        data[2] = -1.0;
        data[4] = -1.0;
        data[6] = 1.0;
        data[8] = 1.0;
        let g = GradientMap::from_values(10, 1, data).unwrap();
        let p = column_edge_pairs(&g, 0.0).unwrap()[0];
        assert_eq!((p.u_upper, p.u_bottom), (2, 6));
    }
}
