//! L2-regularised support vector regression with squared ε-insensitive loss,
//! solved in the primal:
//!
//! `min_w ½‖w‖² + C Σ_i max(0, |wᵀx̃_i − d_i| − ε)²`, with `x̃ = [x, 1]`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OSVR";
const VERSION: u32 = 1;
/// Samples per partial sum; partial sums are added in chunk order.
const CHUNK: usize = 256;
const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Row-major feature matrix with targets in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrTrainSet {
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl SvrTrainSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: Vec::new(), targets: Vec::new() }
    }

    pub fn push(&mut self, x: &[f64], d: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::invalid(format!("target {d} outside [0, 1]")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        self.features.extend_from_slice(x);
        self.targets.push(d);
        Ok(())
    }

    pub fn extend(&mut self, other: &SvrTrainSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: other.dim });
        }
        self.features.extend_from_slice(&other.features);
        self.targets.extend_from_slice(&other.targets);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvrSolver {
    /// Steepest descent with Armijo backtracking.
    GradientDescent,
    /// Truncated-Newton steps (conjugate gradients on the generalised
    /// Hessian) with Armijo backtracking.
    NewtonCg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Learn the weight of the appended constant feature; when false it stays 0.
    pub fit_bias: bool,
    pub solver: SvrSolver,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self { c: 1.0, epsilon: 0.1, tol: 1e-6, max_iter: 5000, fit_bias: true, solver: SvrSolver::NewtonCg }
    }
}

/// Trained weights: `dim` feature weights followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub w: Vec<f64>,
    pub c: f64,
    pub epsilon: f64,
}

/// Convergence trace of [`svr_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct SvrTrainReport {
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub objectives: Vec<f64>,
    pub grad_inf_norm: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `wᵀx̃` for the stored row `i`.
fn margin(set: &SvrTrainSet, w: &[f64], i: usize) -> f64 {
    dot(&w[..set.dim], set.features(i)) + w[set.dim]
}

fn check_params(set: &SvrTrainSet, w: &[f64], c: f64, epsilon: f64) -> Result<()> {
    if w.len() != set.dim + 1 {
        return Err(Error::Dimension { expected: set.dim + 1, got: w.len() });
    }
    if !(c > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("need C > 0 and epsilon >= 0, got C={c} epsilon={epsilon}")));
    }
    Ok(())
}

/// Signed excess `sign(r)·max(0, |r| − ε)` of residual `r`.
fn excess(r: f64, epsilon: f64) -> f64 {
    let a = r.abs() - epsilon;
    if a > 0.0 {
        a.copysign(r)
    } else {
        0.0
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK)).map(|k| k * CHUNK..((k + 1) * CHUNK).min(n)).collect()
}

/// Objective value at `w` (length `dim + 1`).
pub fn svr_objective(w: &[f64], set: &SvrTrainSet, c: f64, epsilon: f64) -> Result<f64> {
    check_params(set, w, c, epsilon)?;
    Ok(objective(w, set, c, epsilon, &residuals(w, set)))
}

fn residuals(w: &[f64], set: &SvrTrainSet) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = chunk_ranges(set.len())
        .into_par_iter()
        .map(|r| r.map(|i| margin(set, w, i) - set.targets[i]).collect())
        .collect();
    parts.concat()
}

fn objective(w: &[f64], set: &SvrTrainSet, c: f64, epsilon: f64, res: &[f64]) -> f64 {
    let reg = 0.5 * dot(w, w);
    let loss: f64 = res.iter().map(|&r| excess(r, epsilon).powi(2)).sum();
    debug_assert_eq!(res.len(), set.len());
    reg + c * loss
}

/// `Σ_i coef_i x̃_i` accumulated in fixed chunk order.
fn weighted_rows(set: &SvrTrainSet, coef: &[f64]) -> Vec<f64> {
    let dim = set.dim;
    let parts: Vec<Vec<f64>> = chunk_ranges(set.len())
        .into_par_iter()
        .map(|r| {
            let mut acc = vec![0.0; dim + 1];
            for i in r {
                let k = coef[i];
                if k != 0.0 {
                    for (a, x) in acc[..dim].iter_mut().zip(set.features(i)) {
                        *a += k * x;
                    }
                    acc[dim] += k;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; dim + 1];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(t, x)| *t += x);
    }
    total
}

fn gradient(w: &[f64], set: &SvrTrainSet, c: f64, epsilon: f64, res: &[f64], fit_bias: bool) -> Vec<f64> {
    let coef: Vec<f64> = res.iter().map(|&r| 2.0 * c * excess(r, epsilon)).collect();
    let mut g = weighted_rows(set, &coef);
    g.iter_mut().zip(w).for_each(|(g, w)| *g += w);
    if !fit_bias {
        g[set.dim] = 0.0;
    }
    g
}

/// Analytic gradient of [`svr_objective`].
pub fn svr_gradient(w: &[f64], set: &SvrTrainSet, c: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_params(set, w, c, epsilon)?;
    Ok(gradient(w, set, c, epsilon, &residuals(w, set), true))
}

/// Generalised Hessian–vector product `(I + 2C Σ_{|r_i|>ε} x̃_i x̃_iᵀ) p`.
fn hessian_vec(set: &SvrTrainSet, c: f64, active: &[bool], p: &[f64], fit_bias: bool) -> Vec<f64> {
    let coef: Vec<f64> = (0..set.len()).map(|i| if active[i] { 2.0 * c * margin(set, p, i) } else { 0.0 }).collect();
    let mut hp = weighted_rows(set, &coef);
    hp.iter_mut().zip(p).for_each(|(h, p)| *h += p);
    if !fit_bias {
        hp[set.dim] = 0.0;
    }
    hp
}

/// Conjugate gradients for `H p = −g`, truncated at a relative residual of
/// `min(0.5, sqrt‖g‖)`.
fn newton_direction(set: &SvrTrainSet, c: f64, active: &[bool], g: &[f64], fit_bias: bool) -> Vec<f64> {
    let n = g.len();
    let mut p = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut d = r.clone();
    let g_norm = dot(g, g).sqrt();
    let target = (0.5f64).min(g_norm.sqrt()) * g_norm;
    let mut rr = dot(&r, &r);
    for _ in 0..n.min(250) {
        if rr.sqrt() <= target {
            break;
        }
        let hd = hessian_vec(set, c, active, &d, fit_bias);
        let alpha = rr / dot(&d, &hd);
        p.iter_mut().zip(&d).for_each(|(p, d)| *p += alpha * d);
        r.iter_mut().zip(&hd).for_each(|(r, h)| *r -= alpha * h);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        d.iter_mut().zip(&r).for_each(|(d, r)| *d = r + beta * *d);
    }
    p
}

/// Minimises the objective from `w = 0` until `‖∇‖_∞ ≤ tol` or `max_iter`
/// steps. Every accepted step satisfies the Armijo condition, so the objective
/// trace is non-increasing.
pub fn svr_train(set: &SvrTrainSet, params: &SvrParams) -> Result<(SvrModel, SvrTrainReport)> {
    if set.is_empty() {
        return Err(Error::invalid("empty SVR training set"));
    }
    let mut w = vec![0.0; set.dim + 1];
    check_params(set, &w, params.c, params.epsilon)?;
    let (c, eps) = (params.c, params.epsilon);
    let mut res = residuals(&w, set);
    let mut f = objective(&w, set, c, eps, &res);
    let mut objectives = vec![f];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut g = gradient(&w, set, c, eps, &res, params.fit_bias);
    let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    while inf_norm(&g) > params.tol && iterations < params.max_iter {
        let direction = match params.solver {
            SvrSolver::GradientDescent => g.iter().map(|x| -x).collect::<Vec<f64>>(),
            SvrSolver::NewtonCg => {
                step = 1.0;
                let active: Vec<bool> = res.iter().map(|r| r.abs() > eps).collect();
                newton_direction(set, c, &active, &g, params.fit_bias)
            }
        };
        let slope = dot(&g, &direction);
        if !(slope < 0.0) {
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = w.iter().zip(&direction).map(|(w, d)| w + step * d).collect();
            let trial_res = residuals(&trial, set);
            let trial_f = objective(&trial, set, c, eps, &trial_res);
            if trial_f <= f + ARMIJO_C * step * slope {
                accepted = Some((trial, trial_res, trial_f));
                break;
            }
            step *= SHRINK;
        }
        let Some((trial, trial_res, trial_f)) = accepted else { break };
        assert!(trial_f <= f, "accepted step increased the objective");
        // No representable decrease left: the objective has stalled at rounding level.
        if trial_f == f {
            break;
        }
        w = trial;
        res = trial_res;
        f = trial_f;
        objectives.push(f);
        iterations += 1;
        g = gradient(&w, set, c, eps, &res, params.fit_bias);
        if params.solver == SvrSolver::GradientDescent {
            step *= 2.0;
        }
    }
    let grad_inf_norm = inf_norm(&g);
    let report = SvrTrainReport { iterations, objectives, grad_inf_norm, converged: grad_inf_norm <= params.tol };
    Ok((SvrModel { w, c, epsilon: eps }, report))
}

impl SvrModel {
    pub fn dim(&self) -> usize {
        self.w.len() - 1
    }

    pub fn bias(&self) -> f64 {
        self.w[self.dim()]
    }

    /// Raw `wᵀx + bias`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(dot(&self.w[..self.dim()], x) + self.bias())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.w.len() + 2));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for x in self.w.iter().chain([&self.c, &self.epsilon]) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Model("bad magic, not an SVR model".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Model(format!("unsupported SVR model version {version}, expected {VERSION}")));
        }
        let dim = u32_at(8) as usize;
        let expected = 12 + 8 * (dim + 3);
        if bytes.len() != expected {
            return Err(Error::Model(format!("SVR model is {} bytes, expected {expected}", bytes.len())));
        }
        let vals: Vec<f64> =
            bytes[12..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let (w, tail) = vals.split_at(dim + 1);
        if w.iter().chain(tail).any(|x| !x.is_finite()) {
            return Err(Error::Model("non-finite value in SVR model".into()));
        }
        Ok(Self { w: w.to_vec(), c: tail[0], epsilon: tail[1] })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
