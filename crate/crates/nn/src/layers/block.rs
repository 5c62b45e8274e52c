use rand::Rng;

use super::{join, BatchNorm2d, Conv2d, Layer, Mode, Role};
use crate::{NnError, Result, Tensor};

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = input.clone();
        for l in &mut self.layers {
            x = l.forward(&x, mode)?;
        }
        Ok(x)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for l in &self.layers {
            x = l.infer(&x)?;
        }
        Ok(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn kinks(&self, out: &mut Vec<u32>) {
        for l in &self.layers {
            l.kinks(out);
        }
    }
}

/// Convolution → batch-norm → ReLU, optionally followed by 2×2 max pooling.
///
/// Batch-norm, ReLU and pooling run as one fused pass over the convolution
/// output; only the normalised activations and the pooling argmax are kept
/// for the backward pass. Semantics match the corresponding chain of
/// [`BatchNorm2d`], [`super::Relu`] and [`MaxPool2`].
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pool: bool,
    cache: Option<BlockCache>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// Convolution output dims (n, c, h, w).
    dims: [usize; 4],
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    /// Flat pre-pool index chosen by each pooled output; empty without pooling.
    argmax: Vec<u32>,
}

impl ConvBlock {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, pool: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::same(in_channels, out_channels, kernel, rng)?,
            bn: BatchNorm2d::new(out_channels),
            pool,
            cache: None,
        })
    }

    pub fn has_pool(&self) -> bool {
        self.pool
    }

    /// Normalises `z` in place (it becomes x̂) and returns the activated,
    /// optionally pooled output with its argmax.
    fn activate(&self, z: &mut [f64], [n, c, h, w]: [usize; 4], mean: &[f64], inv_std: &[f64]) -> Result<(Tensor, Vec<u32>)> {
        let hw = h * w;
        let gamma = self.bn.gamma.data();
        let beta = self.bn.beta.data();
        for (p, plane) in z.chunks_mut(hw).enumerate() {
            let ch = p % c;
            let (mu, is) = (mean[ch], inv_std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - mu) * is);
        }
        let act = |j: usize, ch: usize| (gamma[ch] * z[j] + beta[ch]).max(0.0);
        if !self.pool {
            let out = (0..z.len()).map(|j| act(j, (j / hw) % c)).collect();
            return Ok((Tensor::new(&[n, c, h, w], out)?, Vec::new()));
        }
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(NnError::Shape(format!("{h}x{w} is too small for 2x2 pooling")));
        }
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let ch = p % c;
            let base = p * hw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    let mut best_v = act(best, ch);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        let v = act(j, ch);
                        if v > best_v {
                            best = j;
                            best_v = v;
                        }
                    }
                    out.push(best_v);
                    argmax.push(best as u32);
                }
            }
        }
        Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
    }

    fn conv_dims(z: &Tensor) -> Result<[usize; 4]> {
        let (n, c, h, w) = z.dims4()?;
        Ok([n, c, h, w])
    }

    fn eval_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let eps = self.bn.eps();
        let inv = self.bn.running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        (self.bn.running_mean.data().to_vec(), inv)
    }
}

impl Layer for ConvBlock {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let z = self.conv.forward(input, mode)?;
        let dims = Self::conv_dims(&z)?;
        let [n, c, h, w] = dims;
        if c != self.bn.channels() {
            return Err(NnError::Shape(format!("batch-norm has {} channels, conv gives {c}", self.bn.channels())));
        }
        let mut z = z.into_data();
        let (mean, inv_std) = match mode {
            Mode::Eval => self.eval_stats(),
            Mode::Train => {
                if n < 2 {
                    return Err(NnError::BatchTooSmall(n));
                }
                let (mean, var) = BatchNorm2d::channel_stats(&z, n, c, h * w);
                self.bn.update_running(&mean, &var, n * h * w);
                let eps = self.bn.eps();
                let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv)
            }
        };
        let (out, argmax) = self.activate(&mut z, dims, &mean, &inv_std)?;
        self.cache = Some(BlockCache { dims, xhat: z, inv_std, mode, argmax });
        Ok(out)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let z = self.conv.infer(input)?;
        let dims = Self::conv_dims(&z)?;
        let (mean, inv_std) = self.eval_stats();
        let mut z = z.into_data();
        Ok(self.activate(&mut z, dims, &mean, &inv_std)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let [n, c, h, w] = cache.dims;
        let hw = h * w;
        let g = grad_out.data();
        let gamma = self.bn.gamma.data().to_vec();
        let beta = self.bn.beta.data().to_vec();
        let active = |j: usize| {
            let ch = (j / hw) % c;
            gamma[ch] * cache.xhat[j] + beta[ch] > 0.0
        };
        let mut grad = vec![0.0; n * c * hw];
        if self.pool {
            if g.len() != cache.argmax.len() {
                return Err(NnError::Shape(format!("block grad has {} values, expected {}", g.len(), cache.argmax.len())));
            }
            for (&gv, &j) in g.iter().zip(&cache.argmax) {
                if active(j as usize) {
                    grad[j as usize] += gv;
                }
            }
        } else {
            if g.len() != grad.len() {
                return Err(NnError::Shape(format!("block grad has {} values, expected {}", g.len(), grad.len())));
            }
            for (j, (d, &gv)) in grad.iter_mut().zip(g).enumerate() {
                if active(j) {
                    *d = gv;
                }
            }
        }
        let m = (n * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for (gv, xh) in grad[off..off + hw].iter().zip(&cache.xhat[off..off + hw]) {
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
            }
        }
        for (p, plane) in grad.chunks_mut(hw).enumerate() {
            let ch = p % c;
            let scale = gamma[ch] * cache.inv_std[ch];
            let xh = &cache.xhat[p * hw..(p + 1) * hw];
            match cache.mode {
                Mode::Eval => plane.iter_mut().for_each(|v| *v *= scale),
                Mode::Train => {
                    let (mb, mg) = (dbeta[ch] / m, dgamma[ch] / m);
                    for (v, x) in plane.iter_mut().zip(xh) {
                        *v = scale * (*v - mb - x * mg);
                    }
                }
            }
        }
        let (_, gg) = self.bn.gamma.data_and_grad_mut();
        gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
        let (_, gb) = self.bn.beta.data_and_grad_mut();
        gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
        self.conv.backward(&Tensor::new(&[n, c, h, w], grad)?)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }

    fn kinks(&self, out: &mut Vec<u32>) {
        if let Some(cache) = &self.cache {
            let hw = cache.dims[2] * cache.dims[3];
            let c = cache.dims[1];
            let (gamma, beta) = (self.bn.gamma.data(), self.bn.beta.data());
            out.extend(
                cache.xhat.iter().enumerate().map(|(j, x)| (gamma[(j / hw) % c] * x + beta[(j / hw) % c] > 0.0) as u32),
            );
            out.extend_from_slice(&cache.argmax);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{MaxPool2, Relu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unfused(block: &ConvBlock) -> (Sequential, BatchNorm2d) {
        let mut s = Sequential::new();
        s.push(block.conv.clone());
        s.push(block.bn.clone());
        s.push(Relu::new());
        if block.has_pool() {
            s.push(MaxPool2::new());
        }
        (s, block.bn.clone())
    }

    #[test]
    fn fused_block_matches_layer_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for pool in [false, true] {
            let mut block = ConvBlock::new(2, 3, 3, pool, &mut rng).unwrap();
            block.bn.gamma.data_mut().copy_from_slice(&[1.2, -0.5, 0.8]);
            block.bn.beta.data_mut().copy_from_slice(&[0.1, 0.3, -0.2]);
            let (mut chain, _) = unfused(&block);
            let x = Tensor::new(&[3, 2, 6, 5], (0..180).map(|v| ((v * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                let a = block.forward(&x, mode).unwrap();
                let b = chain.forward(&x, mode).unwrap();
                assert_eq!(a.shape(), b.shape());
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() < 1e-12);
                }
                let g = Tensor::new(a.shape(), (0..a.len()).map(|v| (v % 7) as f64 - 3.0).collect()).unwrap();
                let ga = block.backward(&g).unwrap();
                let gb = chain.backward(&g).unwrap();
                for (u, v) in ga.data().iter().zip(gb.data()) {
                    assert!((u - v).abs() < 1e-10, "pool={pool} {mode:?}");
                }
            }
            let inferred = block.infer(&x).unwrap();
            let chained = chain.infer(&x).unwrap();
            for (u, v) in inferred.data().iter().zip(chained.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
