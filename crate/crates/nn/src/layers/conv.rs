use rand::Rng;
use rayon::prelude::*;

use super::{axpy, check_same_shape, join, Layer, Mode, Role};
use crate::{init, NnError, Result, Tensor};

/// 2-D cross-correlation with zero padding and no bias (the following
/// batch-norm supplies the shift).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    propagate_input_grad: bool,
    cache: Option<Tensor>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(NnError::Config(format!(
                "conv({in_channels}->{out_channels}, k={kernel}, s={stride}) is degenerate"
            )));
        }
        let n = out_channels * in_channels * kernel * kernel;
        let data = init::kaiming_uniform(n, in_channels * kernel * kernel, rng);
        Ok(Self {
            weight: Tensor::parameter(&[out_channels, in_channels, kernel, kernel], data)?,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            propagate_input_grad: true,
            cache: None,
        })
    }

    /// "Same" convolution: odd kernel, stride 1, padding `k / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!("kernel size {kernel} must be odd")));
        }
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, rng)
    }

    /// Skip the input-gradient computation in `backward` (first layer of a
    /// network). `backward` then returns zeros.
    pub fn set_propagate_input_grad(&mut self, on: bool) {
        self.propagate_input_grad = on;
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, p, s) = (self.kernel, self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(NnError::Shape(format!("{h}x{w} input too small for kernel {k} with padding {p}")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn geometry(&self, input: &Tensor) -> Result<(usize, Geometry)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(NnError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_size(h, w)?;
        Ok((n, Geometry { c, h, w, ho, wo }))
    }

    /// Unfolds one sample into a `(c·k·k) × (ho·wo)` patch matrix.
    fn im2col(&self, x: &[f64], g: &Geometry) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = g.ho * g.wo;
        let mut col = vec![0.0; g.c * k * k * cols];
        for ic in 0..g.c {
            let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ic * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                        if s == 1 {
                            let lo = (p - kx as isize).max(0) as usize;
                            let hi = (g.wo as isize).min(g.w as isize + p - kx as isize).max(0) as usize;
                            if lo < hi {
                                let ilo = (lo as isize + kx as isize - p) as usize;
                                dst[lo..hi].copy_from_slice(&src[ilo..ilo + hi - lo]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && (ix as usize) < g.w {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds a patch matrix back into an
    /// input-shaped buffer.
    fn col2im(&self, col: &[f64], g: &Geometry, out: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = g.ho * g.wo;
        for ic in 0..g.c {
            let plane = &mut out[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ic * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src = &row[oy * g.wo..(oy + 1) * g.wo];
                        if s == 1 {
                            let lo = (p - kx as isize).max(0) as usize;
                            let hi = (g.wo as isize).min(g.w as isize + p - kx as isize).max(0) as usize;
                            if lo < hi {
                                let ilo = (lo as isize + kx as isize - p) as usize;
                                axpy(1.0, &src[lo..hi], &mut dst[ilo..ilo + hi - lo]);
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && (ix as usize) < g.w {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward_sample(&self, x: &[f64], out: &mut [f64], g: &Geometry) {
        let col = self.im2col(x, g);
        let kk = g.c * self.kernel * self.kernel;
        let cols = g.ho * g.wo;
        // out (oc × cols) = W (oc × kk) · col (kk × cols)
        gemm(self.out_channels, kk, cols, self.weight.data(), (kk, 1), &col, (cols, 1), out, false);
    }

    /// Returns (input gradient, weight gradient) for one sample.
    fn backward_sample(&self, x: &[f64], gout: &[f64], g: &Geometry) -> (Vec<f64>, Vec<f64>) {
        let col = self.im2col(x, g);
        let kk = g.c * self.kernel * self.kernel;
        let cols = g.ho * g.wo;
        let oc = self.out_channels;
        let mut gw = vec![0.0; oc * kk];
        // gW (oc × kk) = gout (oc × cols) · colᵀ (cols × kk)
        gemm(oc, cols, kk, gout, (cols, 1), &col, (1, cols), &mut gw, false);
        if !self.propagate_input_grad {
            return (Vec::new(), gw);
        }
        let mut gcol = vec![0.0; kk * cols];
        // gcol (kk × cols) = Wᵀ (kk × oc) · gout (oc × cols)
        gemm(kk, oc, cols, self.weight.data(), (1, kk), gout, (cols, 1), &mut gcol, false);
        let mut gin = vec![0.0; g.c * g.h * g.w];
        self.col2im(&gcol, g, &mut gin);
        (gin, gw)
    }
}

/// `c = a · b` (or `c += a · b` with `accumulate`) for row-major slices with
/// explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geometry(input)?;
        let in_per = g.c * g.h * g.w;
        let out_per = self.out_channels * g.ho * g.wo;
        let mut out = vec![0.0; n * out_per];
        if out_per > 0 && in_per > 0 {
            out.par_chunks_mut(out_per)
                .zip(input.data().par_chunks(in_per))
                .for_each(|(o, x)| self.forward_sample(x, o, &g));
        }
        Tensor::new(&[n, self.out_channels, g.ho, g.wo], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.as_ref().ok_or(NnError::NoCache)?;
        let (n, g) = self.geometry(input)?;
        check_same_shape(grad_out, &[n, self.out_channels, g.ho, g.wo], "conv grad")?;
        let in_per = g.c * g.h * g.w;
        let out_per = self.out_channels * g.ho * g.wo;
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                self.backward_sample(
                    &input.data()[i * in_per..(i + 1) * in_per],
                    &grad_out.data()[i * out_per..(i + 1) * out_per],
                    &g,
                )
            })
            .collect();
        let mut gin = vec![0.0; n * in_per];
        let (_, wgrad) = self.weight.data_and_grad_mut();
        for (i, (gi, gw)) in parts.into_iter().enumerate() {
            for (a, b) in wgrad.iter_mut().zip(&gw) {
                *a += b;
            }
            if !gi.is_empty() {
                gin[i * in_per..(i + 1) * in_per].copy_from_slice(&gi);
            }
        }
        Tensor::new(input.shape(), gin)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        f(&join(prefix, "weight"), &self.weight, Role::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        f(&join(prefix, "weight"), &mut self.weight, Role::Param);
    }
}
