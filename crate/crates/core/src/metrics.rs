//! Confusion-matrix metrics, ROC analysis, threshold selection and bootstrap intervals.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Counts for the rule "positive iff score ≥ threshold". Labels: 1 positive, 0 negative.
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Metrics whose denominator is zero are `None`, never a silent 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub bacc: Option<f64>,
    pub fm: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_metrics(c: &ConfusionCounts) -> ConfusionMetrics {
    let sen = ratio(c.tp, c.tp + c.fn_);
    let spe = ratio(c.tn, c.tn + c.fp);
    let bacc = sen.zip(spe).map(|(a, b)| (a + b) / 2.0);
    let fm = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    ConfusionMetrics { sen, spe, bacc, fm }
}

/// ROC points for descending thresholds. `thresholds[0]` is `+∞` (the
/// `(0, 0)` point); `thresholds[i]` for `i ≥ 1` is a distinct score and
/// `points[i]` the `(fpr, tpr)` of "positive iff score ≥ thresholds[i]".
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension { expected: scores.len(), got: labels.len() });
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid(format!("label {y} is not 0 or 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(format!("ROC needs both classes, got {n_pos} positive and {n_neg} negative")));
    }
    Ok((n_pos, n_neg))
}

/// ROC curve and its area. Tied scores form one threshold, so the area over
/// a tie group is a trapezoid (Mann–Whitney with half credit for ties).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64)> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area2 = 0.0; // twice the area in count units (tp·fp grid)
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as f64;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        thresholds.push(t);
    }
    let auc = area2 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok((RocCurve { points, thresholds, n_pos, n_neg }, auc))
}

/// The chosen operating point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// The threshold maximising `tpr − fpr` (Youden) among the distinct scores,
/// for the rule "positive iff score ≥ threshold". Ties prefer the higher
/// specificity, then the lower threshold.
pub fn diagnostic_threshold(curve: &RocCurve) -> Result<OperatingPoint> {
    // Youden index compared exactly in count units: J·P·N = tp·N − fp·P.
    let (p, n) = (curve.n_pos as i128, curve.n_neg as i128);
    let counts = |fpr: f64, tpr: f64| ((tpr * p as f64).round() as i128, (fpr * n as f64).round() as i128);
    let mut best: Option<(OperatingPoint, i128, i128)> = None;
    for (&(fpr, tpr), &threshold) in curve.points.iter().zip(&curve.thresholds).skip(1) {
        let (tp, fp) = counts(fpr, tpr);
        let j = tp * n - fp * p;
        let better = match best {
            None => true,
            Some((b, jb, fpb)) => j > jb || (j == jb && (fp < fpb || (fp == fpb && threshold < b.threshold))),
        };
        if better {
            best = Some((OperatingPoint { threshold, fpr, tpr }, j, fp));
        }
    }
    best.map(|(b, _, _)| b).ok_or_else(|| Error::invalid("ROC curve has no score thresholds"))
}

/// A percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples dropped after exhausting redraws (single-class each time).
    pub skipped: usize,
}

const MAX_REDRAWS: usize = 10;

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over sample indices. Resample `b` draws from its own
/// ChaCha8 stream `b` of `seed`, so the interval does not depend on thread
/// count. Resamples lacking either class are redrawn up to 10 times, then skipped.
pub fn bootstrap_ci<F>(scores: &[f64], labels: &[u8], statistic: F, n_resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[f64], &[u8]) -> Result<f64> + Sync,
{
    check_inputs(scores, labels)?;
    if n_resamples < 100 {
        return Err(Error::invalid(format!("need at least 100 resamples, got {n_resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} must lie in (0, 1)")));
    }
    let n = scores.len();
    let draws: Vec<Option<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            for _ in 0..=MAX_REDRAWS {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let ys: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                let pos = ys.iter().filter(|&&y| y == 1).count();
                if pos == 0 || pos == n {
                    continue;
                }
                let xs: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                return Some(statistic(&xs, &ys));
            }
            None
        })
        .map(|r| r.transpose())
        .collect::<Result<_>>()?;
    let skipped = draws.iter().filter(|d| d.is_none()).count();
    let mut stats: Vec<f64> = draws.into_iter().flatten().collect();
    if stats.is_empty() {
        return Err(Error::invalid("every bootstrap resample was single-class"));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi { lo: quantile(&stats, alpha), hi: quantile(&stats, 1.0 - alpha), skipped })
}

/// AUC as a bootstrap statistic.
pub fn auc_statistic(scores: &[f64], labels: &[u8]) -> Result<f64> {
    roc_auc(scores, labels).map(|(_, a)| a)
}

/// Default number of bootstrap resamples.
pub const DEFAULT_RESAMPLES: usize = 2000;

/// Evaluation summary of a scored test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub auc_ci: [f64; 2],
    pub ci_method: String,
    pub threshold: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub bacc: Option<f64>,
    pub fm: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

/// AUC with a 95% percentile-bootstrap interval, and the confusion metrics
/// at the diagnostic threshold.
pub fn evaluate(scores: &[f64], labels: &[u8], n_resamples: usize, seed: u64) -> Result<(EvalReport, RocCurve)> {
    let (curve, auc) = roc_auc(scores, labels)?;
    let op = diagnostic_threshold(&curve)?;
    let ci = bootstrap_ci(scores, labels, auc_statistic, n_resamples, 0.95, seed)?;
    let m = confusion_metrics(&ConfusionCounts::at_threshold(scores, labels, op.threshold));
    let report = EvalReport {
        auc,
        auc_ci: [ci.lo, ci.hi],
        ci_method: format!("percentile bootstrap, {n_resamples} resamples, 95%"),
        threshold: op.threshold,
        sen: m.sen,
        spe: m.spe,
        bacc: m.bacc,
        fm: m.fm,
        n_pos: curve.n_pos,
        n_neg: curve.n_neg,
        seed,
    };
    Ok((report, curve))
}

/// ROC points as CSV with a `threshold,fpr,tpr` header.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for (&(fpr, tpr), t) in curve.points.iter().zip(&curve.thresholds) {
        out.push_str(&format!("{t},{fpr},{tpr}\n"));
    }
    out
}
