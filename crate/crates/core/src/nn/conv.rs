//! 2-D cross-correlation lowered to GEMM through im2col.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::activation::LEAKY_SLOPE;
use crate::tensor::{sum_f64, Shape, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub padding: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    /// Zero-initialized layer.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Result<Self> {
        Ok(Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel])?,
            bias: Tensor::zeros(&[out_ch])?,
            padding,
            stride: 1,
        })
    }

    /// Fan-in scaled Gaussian kernels (He init with the leaky-ReLU gain),
    /// zero bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.in_channels() * self.kernel() * self.kernel();
        let gain = 2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2));
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in self.weight.data_mut() {
            *w = normal.sample(rng) as f32;
        }
        self.bias.data_mut().fill(0.0);
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if self.stride == 0 || padded < k || !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::InvalidArgument(format!(
                    "conv output size is not integral: input {n}, kernel {k}, padding {}, stride {}",
                    self.padding, self.stride
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::mismatch(
                "conv2d input",
                &[s.first().copied().unwrap_or(0), self.in_channels(), 0, 0],
                s,
            ));
        }
        let (ho, wo) = self.output_hw(s[2], s[3])?;
        Ok((s[0], s[2], s[3], ho, wo))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, ho, wo) = self.check_input(x)?;
        let cin = self.in_channels();
        let cout = self.out_channels();
        let k = self.kernel();
        let kdim = cin * k * k;
        let spatial = ho * wo;
        let geom = Geometry {
            cin,
            h,
            w,
            k,
            pad: self.padding,
            stride: self.stride,
            ho,
            wo,
        };

        let mut out = vec![0f32; b * cout * spatial];
        let in_stride = cin * h * w;
        out.par_chunks_mut(cout * spatial)
            .enumerate()
            .for_each_init(
                || vec![0f32; kdim * spatial],
                |col, (i, dst)| {
                    geom.im2col(&x.data()[i * in_stride..(i + 1) * in_stride], col);
                    for (o, row) in dst.chunks_mut(spatial).enumerate() {
                        row.fill(self.bias.data()[o]);
                    }
                    // dst[cout, spatial] += W[cout, kdim] * col[kdim, spatial]
                    gemm(
                        cout,
                        kdim,
                        spatial,
                        self.weight.data(),
                        (kdim, 1),
                        col,
                        (spatial, 1),
                        1.0,
                        dst,
                    );
                },
            );
        Ok(Tensor::from_parts(Shape::nchw(b, cout, ho, wo)?, out))
    }

    pub fn backward(&self, grad_out: &Tensor, input: &Tensor) -> Result<ConvGrads> {
        let (b, h, w, ho, wo) = self.check_input(input)?;
        let cin = self.in_channels();
        let cout = self.out_channels();
        let expected = [b, cout, ho, wo];
        if grad_out.shape() != expected {
            return Err(Error::mismatch("conv2d grad_out", &expected, grad_out.shape()));
        }
        let k = self.kernel();
        let kdim = cin * k * k;
        let spatial = ho * wo;
        let geom = Geometry {
            cin,
            h,
            w,
            k,
            pad: self.padding,
            stride: self.stride,
            ho,
            wo,
        };
        let in_stride = cin * h * w;
        let out_stride = cout * spatial;

        let mut grad_input = vec![0f32; input.numel()];
        // Per-sample weight gradients are reduced afterwards in sample order,
        // which keeps the result independent of the worker count.
        let partials: Vec<Vec<f32>> = grad_input
            .par_chunks_mut(in_stride)
            .enumerate()
            .map_init(
                || (vec![0f32; kdim * spatial], vec![0f32; kdim * spatial]),
                |(col, gcol), (i, gin)| {
                    let x = &input.data()[i * in_stride..(i + 1) * in_stride];
                    let gout = &grad_out.data()[i * out_stride..(i + 1) * out_stride];
                    geom.im2col(x, col);
                    let mut gw = vec![0f32; cout * kdim];
                    // gw[cout, kdim] = gout[cout, spatial] * col^T
                    gemm(cout, spatial, kdim, gout, (spatial, 1), col, (1, spatial), 0.0, &mut gw);
                    // gcol[kdim, spatial] = W^T * gout
                    gemm(
                        kdim,
                        cout,
                        spatial,
                        self.weight.data(),
                        (1, kdim),
                        gout,
                        (spatial, 1),
                        0.0,
                        gcol,
                    );
                    geom.col2im(gcol, gin);
                    gw
                },
            )
            .collect();

        let mut gw = vec![0f32; cout * kdim];
        for p in &partials {
            for (a, &v) in gw.iter_mut().zip(p) {
                *a += v;
            }
        }
        let mut gb = vec![0f64; cout];
        for i in 0..b {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = i * out_stride + o * spatial;
                *acc += sum_f64(&grad_out.data()[start..start + spatial]);
            }
        }

        Ok(ConvGrads {
            input: Tensor::from_parts(input.shape_obj().clone(), grad_input),
            weight: Tensor::from_parts(self.weight.shape_obj().clone(), gw),
            bias: Tensor::from_parts(
                self.bias.shape_obj().clone(),
                gb.into_iter().map(|v| v as f32).collect(),
            ),
        })
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    /// `col[(c, ky, kx), (oy, ox)] = x[c, oy*stride + ky - pad, ox*stride + kx - pad]`
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let spatial = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut col[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters-adds columns back into `x`.
    fn col2im(&self, col: &[f32], x: &mut [f32]) {
        x.fill(0.0);
        let spatial = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &col[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`, with `c` dense row-major and
/// `a`, `b` given by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
