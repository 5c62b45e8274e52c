use crate::layers::{Layer, Role};
use crate::{NnError, Result, Tensor};

/// SGD with classical momentum: `v ← μv − lr·g`, `p ← p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    fn update(&mut self, index: usize, param: &mut Tensor) -> Result<()> {
        let n = param.len();
        if self.velocity.len() <= index {
            self.velocity.resize_with(index + 1, Vec::new);
        }
        let v = &mut self.velocity[index];
        if v.is_empty() {
            *v = vec![0.0; n];
        }
        if v.len() != n {
            return Err(NnError::Shape(format!(
                "parameter {index} has {n} values but its velocity has {}",
                v.len()
            )));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        let (data, grad) = param.data_and_grad_mut();
        for ((p, g), vel) in data.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
            *vel = mu * *vel - lr * g;
            *p += *vel;
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p)?;
        }
        Ok(())
    }

    /// Steps every trainable parameter of `layers`, in visiting order.
    pub fn step_layers(&mut self, layers: &mut [&mut dyn Layer]) -> Result<()> {
        let mut index = 0;
        let mut failure = None;
        for layer in layers.iter_mut() {
            layer.visit_mut("", &mut |_, t, role| {
                if role == Role::Param && failure.is_none() {
                    if let Err(e) = self.update(index, t) {
                        failure = Some(e);
                    }
                    index += 1;
                }
            });
        }
        failure.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grads: &[f64]) -> Tensor {
        let mut t = Tensor::parameter(&[values.len()], values.to_vec()).unwrap();
        t.grad_mut().unwrap().copy_from_slice(grads);
        t
    }

    #[test]
    fn zero_momentum_is_plain_gradient_step() {
        let mut p = param(&[1.0, -2.0], &[0.5, -1.0]);
        Sgd::new(0.1, 0.0).step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let mut p = param(&[0.0], &[1.0]);
        let mut opt = Sgd::new(1.0, 0.9);
        opt.step(&mut [&mut p]).unwrap();
        p.zero_grad();
        let mut expected = -1.0;
        for _ in 0..5 {
            opt.step(&mut [&mut p]).unwrap();
            expected *= 0.9;
            assert!((opt.velocity()[0][0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = param(&[0.3, 0.7, -0.2], &[0.0; 3]);
            let mut opt = Sgd::new(0.05, 0.9);
            for k in 0..50 {
                let g: Vec<f64> = p.data().iter().map(|x| 2.0 * x + k as f64 * 1e-3).collect();
                p.grad_mut().unwrap().copy_from_slice(&g);
                opt.step(&mut [&mut p]).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn descends_convex_quadratic_below_stability_limit() {
        // f(p) = 0.5 * L * p², curvature L = 4; any lr < 2 / L = 0.5 decreases f
        let curvature = 4.0;
        for lr in [0.05, 0.2, 0.45] {
            let mut p = param(&[3.0], &[0.0]);
            let f0 = 0.5 * curvature * 9.0;
            p.grad_mut().unwrap()[0] = curvature * p.data()[0];
            Sgd::new(lr, 0.0).step(&mut [&mut p]).unwrap();
            let f1 = 0.5 * curvature * p.data()[0].powi(2);
            assert!(f1 < f0, "lr {lr}");
        }
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut opt = Sgd::new(0.1, 0.9);
        let mut a = param(&[1.0, 2.0], &[0.0, 0.0]);
        opt.step(&mut [&mut a]).unwrap();
        let mut b = param(&[1.0], &[0.0]);
        assert!(matches!(opt.step(&mut [&mut b]), Err(NnError::Shape(_))));
    }
}
