use super::{check_same_shape, join, Layer, Mode, Role};
use crate::{NnError, Result, Tensor};

/// Per-channel batch normalisation over `(n, h, w)` for NCHW input.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    eps: f64,
    /// Weight kept on the old running value at each update.
    momentum: f64,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::parameter(&[channels], vec![1.0; channels]).expect("shape"),
            beta: Tensor::parameter(&[channels], vec![0.0; channels]).expect("shape"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::new(&[channels], vec![1.0; channels]).expect("shape"),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.channels() {
            return Err(NnError::Shape(format!("batch-norm has {} channels, input {c}", self.channels())));
        }
        Ok((n, c, h * w))
    }

    pub(crate) fn eps(&self) -> f64 {
        self.eps
    }

    /// Two-pass per-channel mean and biased variance of NCHW data.
    pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let planes = (0..n).map(|i| &x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
            let mu = planes.clone().map(|p| p.iter().sum::<f64>()).sum::<f64>() / m;
            let q: f64 = planes.map(|p| p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()).sum();
            mean[ch] = mu;
            var[ch] = q / m;
        }
        (mean, var)
    }

    /// Folds batch statistics over `m` values into the running estimates
    /// (unbiased variance).
    pub(crate) fn update_running(&mut self, mean: &[f64], var: &[f64], m: usize) {
        let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
        let mom = self.momentum;
        for (ch, (&mu, &v)) in mean.iter().zip(var).enumerate() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = mom * *rm + (1.0 - mom) * mu;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = mom * *rv + (1.0 - mom) * v * unbias;
        }
    }

    fn eval_forward(&self, input: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, c, hw) = self.check(input)?;
        let inv_std: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; input.len()];
        let mut out = vec![0.0; input.len()];
        for i in 0..n {
            for ch in 0..c {
                let mu = self.running_mean.data()[ch];
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = (input.data()[j] - mu) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g * xh + b;
                }
            }
        }
        Ok((Tensor::new(input.shape(), out)?, xhat, inv_std))
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            let (out, xhat, inv_std) = self.eval_forward(input)?;
            self.cache = Some(Cache { shape: input.shape().to_vec(), xhat, inv_std, mode });
            return Ok(out);
        }
        let (n, c, hw) = self.check(input)?;
        if n < 2 {
            return Err(NnError::BatchTooSmall(n));
        }
        let x = input.data();
        let (mean, var) = Self::channel_stats(x, n, c, hw);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = (x[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g * xh + b;
                }
            }
        }
        self.update_running(&mean, &var, n * hw);
        self.cache = Some(Cache { shape: input.shape().to_vec(), xhat, inv_std, mode });
        Tensor::new(input.shape(), out)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.eval_forward(input)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(NnError::NoCache)?;
        check_same_shape(grad_out, &cache.shape, "batch-norm grad")?;
        let (n, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
        let m = (n * hw) as f64;
        let g = grad_out.data();
        let gamma = self.gamma.data().to_vec();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    dgamma[ch] += g[j] * cache.xhat[j];
                    dbeta[ch] += g[j];
                }
            }
        }
        let mut gin = vec![0.0; g.len()];
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    gin[j] = match cache.mode {
                        Mode::Eval => scale * g[j],
                        // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                        Mode::Train => scale * (g[j] - dbeta[ch] / m - cache.xhat[j] * dgamma[ch] / m),
                    };
                }
            }
        }
        let (_, gg) = self.gamma.data_and_grad_mut();
        gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
        let (_, gb) = self.beta.data_and_grad_mut();
        gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
        Tensor::new(&cache.shape, gin)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "gamma"), &self.gamma, Role::Param);
        f(&join(prefix, "beta"), &self.beta, Role::Param);
        f(&join(prefix, "running_mean"), &self.running_mean, Role::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, Role::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "gamma"), &mut self.gamma, Role::Param);
        f(&join(prefix, "beta"), &mut self.beta, Role::Param);
        f(&join(prefix, "running_mean"), &mut self.running_mean, Role::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, Role::Buffer);
    }
}
