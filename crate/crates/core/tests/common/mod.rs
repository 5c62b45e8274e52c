//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. They favour obviousness over speed.

#![allow(dead_code)]

use octangle::GrayImage;

/// AUC by counting concordant positive/negative pairs, ties scoring 1/2.
pub fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Sensitivity + specificity of "positive iff score ≥ t".
pub fn youden_at(scores: &[f64], labels: &[u8], t: f64) -> (f64, f64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let tp = scores.iter().zip(labels).filter(|(&s, &y)| y == 1 && s >= t).count() as f64;
    let tn = scores.iter().zip(labels).filter(|(&s, &y)| y == 0 && s < t).count() as f64;
    (tp / pos, tn / neg)
}

/// Exhaustive Youden search over every distinct score; ties prefer the
/// higher specificity, then the lower threshold. Compared in exact counts.
pub fn brute_force_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64, f64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as i64;
    let neg = labels.len() as i64 - pos;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<(f64, i64, i64, i64)> = None;
    for &t in &candidates {
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| y == 1 && s >= t).count() as i64;
        let tn = scores.iter().zip(labels).filter(|(&s, &y)| y == 0 && s < t).count() as i64;
        let j = tp * neg + tn * pos;
        let better = match best {
            None => true,
            Some((bt, bj, _, btn)) => j > bj || (j == bj && (tn > btn || (tn == btn && t < bt))),
        };
        if better {
            best = Some((t, j, tp, tn));
        }
    }
    let (t, _, tp, tn) = best.unwrap();
    (t, tp as f64 / pos as f64, tn as f64 / neg as f64)
}

/// Central finite-difference gradient.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Mirror index for half-sample symmetric padding, by explicit folding.
fn mirror(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct (non-separated) 2-D Gaussian blur with mirrored borders.
pub fn direct_gaussian(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut weights = Vec::new();
    let mut total = 0.0;
    for du in -r..=r {
        for dv in -r..=r {
            let wgt = (-((du * du + dv * dv) as f64) / (2.0 * sigma * sigma)).exp();
            weights.push((du, dv, wgt));
            total += wgt;
        }
    }
    let mut out = Vec::with_capacity((h * w) as usize);
    for u in 0..h {
        for v in 0..w {
            let mut acc = 0.0;
            for &(du, dv, wgt) in &weights {
                acc += wgt * img.get(mirror(u + du, h), mirror(v + dv, w));
            }
            out.push(acc / total);
        }
    }
    out
}

/// HOG computed pixel by pixel: each pixel's gradient votes into every bin
/// with weight `max(0, 1 − d/20°)` where `d` is the circular distance to the
/// bin centre; cells of `cell` px, 2×2-cell blocks with stride 1.
pub fn naive_hog(img: &GrayImage, cell: usize, bins: usize, eps: f64) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let at = |u: isize, v: isize| img.get(u.clamp(0, h as isize - 1) as usize, v.clamp(0, w as isize - 1) as usize);
    let width = 180.0 / bins as f64;
    let cell_hist = |cu: usize, cv: usize| -> Vec<f64> {
        let mut hist = vec![0.0; bins];
        for u in cu * cell..(cu + 1) * cell {
            for v in cv * cell..(cv + 1) * cell {
                let (ui, vi) = (u as isize, v as isize);
                let gx = at(ui, vi + 1) - at(ui, vi - 1);
                let gy = at(ui + 1, vi) - at(ui - 1, vi);
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
                for (b, slot) in hist.iter_mut().enumerate() {
                    let c = b as f64 * width;
                    let d = (angle - c).abs();
                    let d = d.min(180.0 - d);
                    *slot += mag * (1.0 - d / width).max(0.0);
                }
            }
        }
        hist
    };
    let (cy, cx) = (h / cell, w / cell);
    let mut out = Vec::new();
    for bu in 0..cy - 1 {
        for bv in 0..cx - 1 {
            let mut block = Vec::new();
            for (du, dv) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                block.extend(cell_hist(bu + du, bv + dv));
            }
            let norm = (block.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            out.extend(block.iter().map(|x| x / norm));
        }
    }
    out
}

/// Least-squares polynomial by normal equations on monomials of the
/// centred abscissa, solved with Gauss-Jordan elimination; returns the value
/// of the fitted polynomial at `v`.
pub fn normal_equation_fit(points: &[(f64, f64)], degree: usize) -> impl Fn(f64) -> f64 {
    let mean = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let scale = points.iter().map(|p| (p.0 - mean).abs()).fold(0.0, f64::max).max(1.0);
    let k = degree + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for &(x, y) in points {
        let t = (x - mean) / scale;
        let pw: Vec<f64> = (0..k).map(|i| t.powi(i as i32)).collect();
        for i in 0..k {
            for j in 0..k {
                a[i][j] += pw[i] * pw[j];
            }
            a[i][k] += pw[i] * y;
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for row in 0..k {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    move |x: f64| {
        let t = (x - mean) / scale;
        coef.iter().enumerate().map(|(i, c)| c * t.powi(i as i32)).sum()
    }
}

/// A random scored sample of size `2..=50` holding both classes, with scores
/// drawn from a handful of values so that ties are frequent.
pub fn tied_instance(rng: &mut impl rand::Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(1..=12);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let level = rng.random_range(0..levels) as f64 / levels as f64;
                level + 0.3 * labels[i] as f64 * rng.random::<f64>().round()
            })
            .collect();
        return (scores, labels);
    }
}

/// Sensitivity, specificity, balanced accuracy and F-measure from counts,
/// written out directly; `None` where a denominator vanishes.
pub fn hand_metrics(tp: u64, tn: u64, fp: u64, fn_: u64) -> [Option<f64>; 4] {
    let sen = if tp + fn_ == 0 { None } else { Some(tp as f64 / (tp + fn_) as f64) };
    let spe = if tn + fp == 0 { None } else { Some(tn as f64 / (tn + fp) as f64) };
    let bacc = match (sen, spe) {
        (Some(a), Some(b)) => Some(0.5 * a + 0.5 * b),
        _ => None,
    };
    let precision = if tp + fp == 0 { None } else { Some(tp as f64 / (tp + fp) as f64) };
    let fm = match (precision, sen) {
        (_, _) if tp == 0 => if fp + fn_ == 0 { None } else { Some(0.0) },
        (Some(p), Some(r)) => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    [sen, spe, bacc, fm]
}

/// Compares optional values at an absolute tolerance.
pub fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}
