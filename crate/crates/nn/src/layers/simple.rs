use super::{check_same_shape, Layer, Mode};
use crate::{NnError, Result, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
        self.mask = Some((input.shape().to_vec(), mask));
        self.infer(input)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Tensor::new(input.shape(), input.data().iter().map(|&v| v.max(0.0)).collect())
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self.mask.as_ref().ok_or(NnError::NoCache)?;
        check_same_shape(grad_out, shape, "relu grad")?;
        let g = grad_out.data().iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
        Tensor::new(shape, g)
    }

    fn kinks(&self, out: &mut Vec<u32>) {
        if let Some((_, mask)) = &self.mask {
            out.extend(mask.iter().map(|&m| m as u32));
        }
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped and
/// ties go to the first element in raster order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    fn pool(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let (n, c, h, w) = input.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(NnError::Shape(format!("{h}x{w} is too small for 2x2 pooling")));
        }
        let x = input.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
        Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (out, arg) = Self::pool(input)?;
        self.cache = Some((input.shape().to_vec(), arg));
        Ok(out)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(Self::pool(input)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.as_ref().ok_or(NnError::NoCache)?;
        if grad_out.len() != arg.len() {
            return Err(NnError::Shape(format!("maxpool grad has {} values, expected {}", grad_out.len(), arg.len())));
        }
        let mut gin = vec![0.0; shape.iter().product()];
        for (&g, &i) in grad_out.data().iter().zip(arg) {
            gin[i as usize] += g;
        }
        Tensor::new(shape, gin)
    }

    fn kinks(&self, out: &mut Vec<u32>) {
        if let Some((_, arg)) = &self.cache {
            out.extend_from_slice(arg);
        }
    }
}

/// `(n, c, h, w)` → `(n, c)` by spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.shape = Some(input.shape().to_vec());
        self.infer(input)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = input.dims4()?;
        let hw = h * w;
        let out = input.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Tensor::new(&[n, c], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.shape.as_ref().ok_or(NnError::NoCache)?;
        check_same_shape(grad_out, &shape[..2], "global-average-pool grad")?;
        let hw = shape[2] * shape[3];
        let mut gin = Vec::with_capacity(shape.iter().product());
        for &g in grad_out.data() {
            gin.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        Tensor::new(shape, gin)
    }
}
