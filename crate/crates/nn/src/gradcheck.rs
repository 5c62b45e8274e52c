//! Central finite-difference verification of layer backward passes.
//!
//! The scalar probed is `Σ forward(x) ⊙ R` for a fixed random projection
//! `R`, so `backward(R)` yields the analytic gradient being checked.
//! Coordinates whose ±h perturbation changes any ReLU mask or pooling
//! argmax are skipped: the function is not differentiable across them.

use rand::seq::index;
use rand::Rng;

use crate::init::stream_rng;
use crate::layers::{zero_grads, Layer, Mode, Role};
use crate::{Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates sampled per tensor (input and each parameter).
    pub max_coords: usize,
    pub seed: u64,
    pub mode: Mode,
    pub check_input: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: 64, seed: 0, mode: Mode::Train, check_input: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-10)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10)
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

struct Probe<'a> {
    layer: &'a mut dyn Layer,
    input: Tensor,
    projection: Vec<f64>,
    mode: Mode,
}

impl Probe<'_> {
    fn eval(&mut self) -> Result<(f64, Vec<u32>)> {
        let y = self.layer.forward(&self.input, self.mode)?;
        let v = y.data().iter().zip(&self.projection).map(|(a, b)| a * b).sum();
        let mut k = Vec::new();
        self.layer.kinks(&mut k);
        Ok((v, k))
    }

    fn set_param(&mut self, tensor: usize, coord: usize, value: f64) {
        let mut i = 0;
        self.layer.visit_mut("", &mut |_, t, role| {
            if role == Role::Param {
                if i == tensor {
                    t.data_mut()[coord] = value;
                }
                i += 1;
            }
        });
    }
}

fn sample_coords(len: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

pub fn grad_check(layer: &mut dyn Layer, input: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = stream_rng(cfg.seed, 0x6772_6164);
    let out = layer.forward(input, cfg.mode)?;
    let projection: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    zero_grads(layer);
    let grad_in = layer.backward(&Tensor::new(out.shape(), projection.clone())?)?;

    let mut params: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    layer.visit("", &mut |name, t, role| {
        if role == Role::Param {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            params.push((name.to_string(), t.data().to_vec(), g));
        }
    });

    let mut probe = Probe { layer, input: input.clone(), projection, mode: cfg.mode };
    let (_, base_kinks) = probe.eval()?;
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked: 0, skipped: 0 };
    let h = cfg.h;

    let record = |name: &str, analytic: f64, numeric: Option<f64>, report: &mut GradCheckReport| match numeric {
        None => report.skipped += 1,
        Some(n) => {
            report.checked += 1;
            let e = relative_error(analytic, n);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = name.to_string();
            }
        }
    };

    if cfg.check_input {
        for i in sample_coords(input.len(), cfg.max_coords, &mut rng) {
            let x0 = input.data()[i];
            probe.input.data_mut()[i] = x0 + h;
            let (up, k_up) = probe.eval()?;
            probe.input.data_mut()[i] = x0 - h;
            let (down, k_down) = probe.eval()?;
            probe.input.data_mut()[i] = x0;
            let numeric = (k_up == base_kinks && k_down == base_kinks).then(|| (up - down) / (2.0 * h));
            record("input", grad_in.data()[i], numeric, &mut report);
        }
    }

    for (t, (name, values, grads)) in params.iter().enumerate() {
        for j in sample_coords(values.len(), cfg.max_coords, &mut rng) {
            let w0 = values[j];
            probe.set_param(t, j, w0 + h);
            let (up, k_up) = probe.eval()?;
            probe.set_param(t, j, w0 - h);
            let (down, k_down) = probe.eval()?;
            probe.set_param(t, j, w0);
            let numeric = (k_up == base_kinks && k_down == base_kinks).then(|| (up - down) / (2.0 * h));
            record(name, grads[j], numeric, &mut report);
        }
    }
    Ok(report)
}
