//! 2-D cross-correlation (no kernel flip) with zero padding, lowered to the
//! matrix kernels through an im2col buffer.

use super::{kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = size + 2 * pad;
    if stride == 0 || k == 0 || span < k || !(span - k).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "size {size}, kernel {k}, stride {stride}, pad {pad} gives a non-integer output size"
        )));
    }
    Ok((span - k) / stride + 1)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: out_dim(h, kh, stride, pad)?,
            ow: out_dim(w, kw, stride, pad)?,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    /// Input pixel read by output position `(oy, ox)` at kernel offset `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// `cols[positions × patch_len]` for one sample.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_len());
        debug_assert_eq!(cols.len(), self.positions() * self.patch_len());
        let patch = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * patch..][..patch];
                let mut q = 0;
                for c in 0..self.c_in {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            row[q] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => input[(c * self.h + y) * self.w + x],
                                None => 0.0,
                            };
                            q += 1;
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of `dcols` back onto an input-shaped gradient.
    pub fn col2im(&self, dcols: &[f64], grad_input: &mut [f64]) {
        let patch = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &dcols[(oy * self.ow + ox) * patch..][..patch];
                let mut q = 0;
                for c in 0..self.c_in {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                grad_input[(c * self.h + y) * self.w + x] += row[q];
                            }
                            q += 1;
                        }
                    }
                }
            }
        }
    }

    /// Kernel `[c_out × patch]` rearranged to `[patch × c_out]`.
    pub fn kernel_t(&self, kernel: &[f64]) -> Vec<f64> {
        let patch = self.patch_len();
        let mut kt = vec![0.0; patch * self.c_out];
        for o in 0..self.c_out {
            for q in 0..patch {
                kt[q * self.c_out + o] = kernel[o * patch + q];
            }
        }
        kt
    }

    /// im2col buffers of `n` samples laid out contiguously.
    pub fn cols_batch(&self, n: usize, input: &[f64]) -> Vec<f64> {
        let span = self.positions() * self.patch_len();
        let mut cols = vec![0.0; n * span];
        for s in 0..n {
            self.im2col(
                &input[s * self.in_len()..(s + 1) * self.in_len()],
                &mut cols[s * span..(s + 1) * span],
            );
        }
        cols
    }

    /// Forward over a batch of `n` samples laid out contiguously. Samples are
    /// processed in chunks to bound the im2col buffer; each output depends
    /// only on its own sample, so chunking does not change results.
    pub fn forward_batch(&self, n: usize, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let pos = self.positions();
        let kt = self.kernel_t(kernel);
        let mut out = vec![0.0; n * self.out_len()];
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            let cols = self.cols_batch(m, &input[start * self.in_len()..(start + m) * self.in_len()]);
            let mut rows = vec![0.0; m * pos * self.c_out];
            kernels::gemm_nn(m * pos, self.patch_len(), self.c_out, &cols, &kt, &mut rows);
            for s in 0..m {
                let dst = &mut out[(start + s) * self.out_len()..][..self.out_len()];
                for p in 0..pos {
                    for o in 0..self.c_out {
                        dst[o * pos + p] = rows[(s * pos + p) * self.c_out + o];
                    }
                }
            }
            start += m;
        }
        out
    }

    /// `[n·positions × c_out]` row layout of an output-shaped gradient.
    fn grad_rows(&self, n: usize, grad_out: &[f64]) -> Vec<f64> {
        let pos = self.positions();
        let mut g_rows = vec![0.0; n * pos * self.c_out];
        for s in 0..n {
            for o in 0..self.c_out {
                for p in 0..pos {
                    g_rows[(s * pos + p) * self.c_out + o] = grad_out[s * self.out_len() + o * pos + p];
                }
            }
        }
        g_rows
    }

    /// Accumulates the kernel gradient of `n` samples into `grad_kernel`,
    /// reducing over samples and positions in order.
    pub fn kernel_grad_batch(&self, n: usize, grad_out: &[f64], input: &[f64], grad_kernel: &mut [f64]) {
        let patch = self.patch_len();
        let cols = self.cols_batch(n, input);
        let g_rows = self.grad_rows(n, grad_out);
        let mut dkt = vec![0.0; patch * self.c_out];
        kernels::gemm_tn(n * self.positions(), patch, self.c_out, &cols, &g_rows, &mut dkt);
        for o in 0..self.c_out {
            for q in 0..patch {
                grad_kernel[o * patch + q] += dkt[q * self.c_out + o];
            }
        }
    }

    /// Input gradient of `n` samples.
    pub fn input_grad_batch(&self, n: usize, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (patch, pos) = (self.patch_len(), self.positions());
        let kt = self.kernel_t(kernel);
        let mut grad_in = vec![0.0; n * self.in_len()];
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            let g_rows = self.grad_rows(m, &grad_out[start * self.out_len()..(start + m) * self.out_len()]);
            let mut dcols = vec![0.0; m * pos * patch];
            kernels::gemm_nt(m * pos, self.c_out, patch, &g_rows, &kt, &mut dcols);
            for s in 0..m {
                self.col2im(
                    &dcols[s * pos * patch..(s + 1) * pos * patch],
                    &mut grad_in[(start + s) * self.in_len()..(start + s + 1) * self.in_len()],
                );
            }
            start += m;
        }
        grad_in
    }
}

/// Samples per im2col chunk.
const CHUNK: usize = 64;

fn geometry(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (n, c, h, w) = match input.shape() {
        &[c, h, w] => (1, c, h, w),
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(Error::Dimension(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
    };
    let &[co, ci, kh, kw] = kernel.shape() else {
        return Err(Error::Dimension(format!(
            "conv2d kernel must be [C_O, C_I, K_H, K_W], got {:?}",
            kernel.shape()
        )));
    };
    if ci != c {
        return Err(Error::Dimension(format!(
            "kernel expects {ci} input channels, input has {c}"
        )));
    }
    Ok((n, ConvGeom::new(c, h, w, co, kh, kw, stride, pad)?))
}

fn out_shape(input: &Tensor, g: &ConvGeom) -> Vec<usize> {
    if input.rank() == 3 {
        vec![g.c_out, g.oh, g.ow]
    } else {
        vec![input.shape()[0], g.c_out, g.oh, g.ow]
    }
}

/// Cross-correlation of `[C_I×H×W]` (or a `[N×C_I×H×W]` batch) with
/// `[C_O×C_I×K_H×K_W]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, g) = geometry(input, kernel, stride, pad)?;
    let out = g.forward_batch(n, input.data(), kernel.data());
    Ok(Tensor::from_parts(out_shape(input, &g), out))
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, g) = geometry(input, kernel, stride, pad)?;
    let expected = out_shape(input, &g);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::Dimension(format!(
            "grad_out {:?} does not match conv output {expected:?}",
            grad_out.shape()
        )));
    }
    let mut gk = vec![0.0; g.kernel_len()];
    g.kernel_grad_batch(n, grad_out.data(), input.data(), &mut gk);
    let gi = g.input_grad_batch(n, grad_out.data(), kernel.data());
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gi),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
    ))
}
