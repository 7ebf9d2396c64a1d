//! 2-D convolution via im2col + GEMM.
//!
//! The contract is the direct cross-correlation sum
//! `out[n,o,y,x] = bias[o] + sum_{i,ky,kx} in[n,i,y*s+ky-p,x*s+kx-p] * w[o,i,ky,kx]`
//! with zero padding. Work is split per batch sample; every sample writes a
//! disjoint output slab and weight gradients are reduced in sample order, so
//! results do not depend on the rayon thread count.

use std::cell::RefCell;

use rayon::prelude::*;

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_channels, in_h, in_w) = input.shape().nchw()?;
        let (out_channels, w_in, kh, kw) = weight.shape().nchw()?;
        if kh != kw {
            return Err(Error::InvalidShape(format!("non-square kernel {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::EvenKernel(kh));
        }
        if w_in != in_channels {
            return Err(Error::ChannelMismatch { op: "conv2d", expected: w_in, actual: in_channels });
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d stride must be >= 1".into()));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kh {
            return Err(Error::InvalidShape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}",
                in_h + 2 * pad,
                in_w + 2 * pad
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            kernel: kh,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kh) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// 1x1, unpadded, unit stride: the input slab already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0 && self.stride == 1
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output columns `ox` whose tap `kx` lands inside the input row.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    // ix = ox * s + kx - p must satisfy 0 <= ix < in_w
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.in_w + p <= kx { 0 } else { (g.in_w + p - kx - 1) / s + 1 };
    let hi = hi.min(g.out_w);
    (lo.min(hi), hi)
}

thread_local! {
    /// Per-thread column buffer, reused across calls so the (fully
    /// overwritten) unfolded patches are not re-allocated and zeroed each time.
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Unfold one sample `[C, H, W]` into `[C*K*K, H_out*W_out]`; every entry is written.
fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let chan = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize || lo == hi {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    dst_row[..lo].fill(0.0);
                    dst_row[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (i, d) in dst_row[lo..hi].iter_mut().enumerate() {
                            *d = src_row[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C, H, W]`.
fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let chan = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, v) in dst_row[first..first + src_row.len()].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in src_row.iter().enumerate() {
                            dst_row[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.out_channels {
            return Err(Error::ChannelMismatch {
                op: "conv2d bias",
                expected: g.out_channels,
                actual: b.numel(),
            });
        }
    }
    input.check_finite("conv2d input")?;

    let mut out = vec![0.0; g.batch * g.out_sample()];
    let w = Mat::new(weight.data(), g.out_channels, g.patch_len());
    out.par_chunks_mut(g.out_sample()).zip(input.data().par_chunks(g.in_sample())).for_each(|(dst, src)| {
        if g.is_pointwise() {
            gemm(w, Mat::new(src, g.in_channels, g.out_plane()), 0.0, dst);
        } else {
            with_scratch(g.patch_len() * g.out_plane(), |cols| {
                im2col(&g, src, cols);
                gemm(w, Mat::new(cols, g.patch_len(), g.out_plane()), 0.0, dst);
            });
        }
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(g.out_plane()).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    });
    Tensor::from_vec(g.output_dims(), out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    if grad_out.dims() != g.output_dims() {
        return Err(Error::InvalidShape(format!(
            "conv2d_backward: grad_out {:?} vs output {:?}",
            grad_out.dims(),
            g.output_dims()
        )));
    }
    let w = Mat::new(weight.data(), g.out_channels, g.patch_len());
    let wsize = weight.numel();

    let mut grad_input = vec![0.0; input.numel()];
    let partial_w: Vec<Vec<f64>> = grad_input
        .par_chunks_mut(g.in_sample())
        .zip(input.data().par_chunks(g.in_sample()))
        .zip(grad_out.data().par_chunks(g.out_sample()))
        .map(|((gin, src), gout)| {
            let gout_mat = Mat::new(gout, g.out_channels, g.out_plane());
            let mut gw = vec![0.0; wsize];
            if g.is_pointwise() {
                gemm(gout_mat, Mat::new(src, g.in_channels, g.out_plane()).t(), 0.0, &mut gw);
                gemm(w.t(), gout_mat, 0.0, gin);
            } else {
                with_scratch(g.patch_len() * g.out_plane(), |cols| {
                    im2col(&g, src, cols);
                    gemm(gout_mat, Mat::new(cols, g.patch_len(), g.out_plane()).t(), 0.0, &mut gw);
                    gemm(w.t(), gout_mat, 0.0, cols);
                    col2im(&g, cols, gin);
                });
            }
            gw
        })
        .collect();

    let mut grad_weight = vec![0.0; wsize];
    for gw in &partial_w {
        for (a, b) in grad_weight.iter_mut().zip(gw) {
            *a += b;
        }
    }
    let mut grad_bias = vec![0.0; g.out_channels];
    for gout in grad_out.data().chunks(g.out_sample()) {
        for (o, row) in gout.chunks(g.out_plane()).enumerate() {
            grad_bias[o] += row.iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.dims().to_vec(), grad_input)?,
        weight: Tensor::from_vec(weight.dims().to_vec(), grad_weight)?,
        bias: Tensor::from_vec(vec![g.out_channels], grad_bias)?,
    })
}
