use rand::Rng;

use super::{check_same_shape, dot, join, Layer, Mode, Role};
use crate::{init, NnError, Result, Tensor};

/// Fully connected layer `y = x Wᵀ + b` on `(n, in)` input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(NnError::Config(format!("linear {inputs}->{outputs} is degenerate")));
        }
        let w = init::kaiming_uniform(inputs * outputs, inputs, rng);
        Ok(Self {
            weight: Tensor::parameter(&[outputs, inputs], w)?,
            bias: Tensor::parameter(&[outputs], vec![0.0; outputs])?,
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Layer for Linear {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (n, f) = input.dims2()?;
        if f != self.inputs() {
            return Err(NnError::Shape(format!("linear expects {} features, got {f}", self.inputs())));
        }
        let o = self.outputs();
        let mut out = Vec::with_capacity(n * o);
        for x in input.data().chunks(f) {
            for j in 0..o {
                out.push(dot(&self.weight.data()[j * f..(j + 1) * f], x) + self.bias.data()[j]);
            }
        }
        Tensor::new(&[n, o], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let (n, f) = input.dims2()?;
        let o = self.outputs();
        check_same_shape(grad_out, &[n, o], "linear grad")?;
        let mut gin = vec![0.0; n * f];
        {
            let w = self.weight.data().to_vec();
            let (_, gw) = self.weight.data_and_grad_mut();
            for i in 0..n {
                let x = &input.data()[i * f..(i + 1) * f];
                for j in 0..o {
                    let g = grad_out.data()[i * o + j];
                    for k in 0..f {
                        gw[j * f + k] += g * x[k];
                        gin[i * f + k] += g * w[j * f + k];
                    }
                }
            }
        }
        let (_, gb) = self.bias.data_and_grad_mut();
        for i in 0..n {
            for j in 0..o {
                gb[j] += grad_out.data()[i * o + j];
            }
        }
        Tensor::new(&[n, f], gin)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "weight"), &self.weight, Role::Param);
        f(&join(prefix, "bias"), &self.bias, Role::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Param);
        f(&join(prefix, "bias"), &mut self.bias, Role::Param);
    }
}
