//! Two-logit softmax head with binary cross-entropy.

use crate::{NnError, Result, Tensor};

/// Probabilities are clamped into `[P_MIN, 1 - P_MIN]` before the log.
pub const P_MIN: f64 = 1e-12;

/// Class-1 probability of a two-logit softmax, computed without overflow.
fn class1_probability(z0: f64, z1: f64) -> f64 {
    let d = z1 - z0;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of an `(n, k)` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(logits.shape(), out)
}

/// Mean binary cross-entropy of `softmax(logits)[:, 1]` against `labels`.
///
/// `class_weights[c]` scales the loss of every sample whose label is `c`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_bce_loss(logits: &Tensor, labels: &[u8], class_weights: Option<[f64; 2]>) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if k != 2 {
        return Err(NnError::Shape(format!("expected two logits per sample, got {k}")));
    }
    if labels.len() != n {
        return Err(NnError::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(NnError::BadLabel(bad));
    }
    let weights = class_weights.unwrap_or([1.0, 1.0]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * 2];
    for (i, (z, &y)) in logits.data().chunks(2).zip(labels).enumerate() {
        let p = class1_probability(z[0], z[1]);
        let pc = p.clamp(P_MIN, 1.0 - P_MIN);
        let y = f64::from(y);
        let w = weights[y as usize];
        loss -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        if p > P_MIN && p < 1.0 - P_MIN {
            let d = w * (p - y) / n as f64;
            grad[2 * i] = -d;
            grad[2 * i + 1] = d;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, 2], grad)?))
}
