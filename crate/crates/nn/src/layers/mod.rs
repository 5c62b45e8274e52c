//! Layer trait and the fixed layer set.

mod batchnorm;
mod block;
mod conv;
mod linear;
mod simple;

pub use batchnorm::BatchNorm2d;
pub use block::{ConvBlock, Sequential};
pub use conv::Conv2d;
pub use linear::Linear;
pub use simple::{GlobalAvgPool, MaxPool2, Relu};

use crate::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates.
    Train,
    /// Running statistics only.
    Eval,
}

/// Whether a tensor is trained or is carried state (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Param,
    Buffer,
}

pub trait Layer: Send + Sync {
    /// Forward pass that caches whatever `backward` needs.
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Eval-mode forward pass with no side effects.
    fn infer(&self, input: &Tensor) -> Result<Tensor>;

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input of the last `forward`.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    fn visit(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor, Role)) {}

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor, Role)) {}

    /// Records the piecewise-linear branch taken by the last forward (ReLU
    /// masks, pooling argmax). Finite-difference checks compare these to
    /// detect perturbations that straddle a kink.
    fn kinks(&self, _out: &mut Vec<u32>) {}
}

pub fn zero_grads(layer: &mut dyn Layer) {
    layer.visit_mut("", &mut |_, t, role| {
        if role == Role::Param {
            t.zero_grad();
        }
    });
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn check_same_shape(a: &Tensor, b: &[usize], what: &str) -> Result<()> {
    if a.shape() != b {
        return Err(crate::NnError::Shape(format!(
            "{what}: expected {b:?}, got {:?}",
            a.shape()
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Dot product with eight independent accumulators, fixed summation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}
