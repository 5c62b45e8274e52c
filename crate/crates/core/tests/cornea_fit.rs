mod common;

use octangle::cornea::{detect_boundary, fit_quartic, sample_boundary, BoundaryParams, QuarticCurve};
use octangle::synth::{generate_sample, sample_params, SynthRanges};
use octangle::manifest::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quartic(c: [f64; 5], v: f64) -> f64 {
    c.iter().enumerate().map(|(i, a)| a * v.powi(i as i32)).sum()
}

#[test]
fn exact_quartic_is_recovered() {
    let c = [120.0, -0.3, 2e-3, -4e-6, 3e-9];
    let pts: Vec<(usize, f64)> = (20..580).step_by(3).map(|v| (v, quartic(c, v as f64))).collect();
    let fit = fit_quartic(&pts, 1).unwrap();
    for v in (20..580).step_by(7) {
        assert!((fit.eval(v as f64) - quartic(c, v as f64)).abs() < 1e-7);
    }
    let back = fit.coefficients();
    for (a, b) in back.iter().zip(&c) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-9), "{a} vs {b}");
    }
    assert_eq!(fit.domain(), (20, 578));
}

#[test]
fn noisy_fit_matches_normal_equation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = [200.0, 0.1, -1e-3, 1e-6, 0.0];
    let pts: Vec<(usize, f64)> = (0..400).map(|v| (v, quartic(c, v as f64) + rng.random_range(-1.0..1.0))).collect();
    let fit = fit_quartic(&pts, 0).unwrap();
    let oracle = common::normal_equation_fit(&pts.iter().map(|&(v, u)| (v as f64, u)).collect::<Vec<_>>(), 4);
    for v in (0..400).step_by(5) {
        assert!((fit.eval(v as f64) - oracle(v as f64)).abs() < 1e-8);
    }
}

#[test]
fn point_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pts: Vec<(usize, f64)> = (0..100).map(|v| (v * 3, 50.0 + rng.random_range(-2.0..2.0))).collect();
    let a = fit_quartic(&pts, 1).unwrap();
    pts.reverse();
    let b = fit_quartic(&pts, 1).unwrap();
    assert_eq!(a.coefficients(), b.coefficients());
}

#[test]
fn gross_outliers_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = [150.0, 0.05, -2e-4, 0.0, 0.0];
    let mut pts: Vec<(usize, f64)> = (0..300).map(|v| (v, quartic(c, v as f64) + rng.random_range(-1.0..1.0))).collect();
    for v in [60, 120, 180, 240] {
        pts[v].1 += 80.0;
    }
    let clean: Vec<(f64, f64)> =
        pts.iter().filter(|p| ![60, 120, 180, 240].contains(&p.0)).map(|&(v, u)| (v as f64, u)).collect();
    let oracle = common::normal_equation_fit(&clean, 4);
    // Trimming starts from the spike-polluted fit, so a few clean points go
    // too; the result tracks the clean fit closely rather than exactly.
    let robust = fit_quartic(&pts, 3).unwrap();
    let naive = fit_quartic(&pts, 0).unwrap();
    let worst = |f: &QuarticCurve| (5..295).map(|v| (f.eval(v as f64) - oracle(v as f64)).abs()).fold(0.0, f64::max);
    assert!(worst(&robust) < 0.5, "robust fit deviates by {}", worst(&robust));
    assert!(worst(&naive) > 1.0, "naive fit deviates by only {}", worst(&naive));
}

#[test]
fn too_few_columns_is_an_error() {
    assert!(fit_quartic(&[(1, 1.0), (2, 2.0), (3, 3.0), (4, 4.0)], 1).is_err());
    assert!(fit_quartic(&[(1, 1.0), (1, 2.0), (1, 3.0), (2, 4.0), (2, 5.0), (3, 2.0)], 1).is_err());
}

#[test]
fn sampled_boundary_follows_stride_and_clamps_rows() {
    let curve = QuarticCurve::from_coefficients([-5.0, 1.0, 0.0, 0.0, 0.0], 0, 30).unwrap();
    let pts = sample_boundary(&curve, 10, 20).unwrap();
    assert_eq!(pts.iter().map(|p| p.v).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
    assert_eq!(pts.iter().map(|p| p.u).collect::<Vec<_>>(), vec![0, 5, 15, 19]);
}

#[test]
fn synthetic_bottom_arc_is_recovered_within_two_px() {
    let ranges = SynthRanges::default();
    for i in 0..12 {
        let label = if i % 2 == 0 { Label::Closure } else { Label::Open };
        let params = sample_params(i, label, &ranges, 77);
        let clean = octangle::synth::SynthParams { speckle: 0.0, gain: 1.0, ..params };
        let (img, _) = generate_sample(&clean).unwrap();
        let b = detect_boundary(&img, &BoundaryParams::default()).unwrap();
        let (lo, hi) = b.bottom.domain();
        assert!(hi - lo > 300, "sample {i}: domain {lo}..{hi}");
        let n = (hi - lo + 1) as f64;
        let sq: f64 = (lo..=hi).map(|v| (b.bottom.eval(v as f64) - clean.bottom_row(v as f64)).powi(2)).sum();
        let rms = (sq / n).sqrt();
        assert!(rms <= 2.0, "sample {i} (angle {:.1}): bottom RMS {rms:.2} px", clean.angle_deg);
    }
}
