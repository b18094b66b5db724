//! 2-D cross-correlation with zero padding.
//!
//! The loops are ordered so the innermost one walks a contiguous output row;
//! every output element is still accumulated in a fixed (channel, ky, kx)
//! order, so results do not depend on how the batch is scheduled.

use super::Tensor4;
use crate::error::{Error, Result};

pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub kernels: Tensor4,
    pub bias: Vec<f64>,
}

struct Geometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &Tensor4, kernels: &Tensor4, stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_ch, in_h, in_w] = input.dims();
        let [out_ch, k_ch, k_h, k_w] = kernels.dims();
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        if k_ch != in_ch {
            return Err(Error::shape(format!(
                "conv2d: kernels {:?} expect {} input channels but input {:?} has {}",
                kernels.dims(),
                k_ch,
                input.dims(),
                in_ch
            )));
        }
        let (out_h, out_w) = match (
            conv_output_dim(in_h, k_h, stride, pad),
            conv_output_dim(in_w, k_w, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: kernel {k_h}x{k_w} larger than padded input {}x{} (pad {pad})",
                    in_h + 2 * pad,
                    in_w + 2 * pad
                )))
            }
        };
        Ok(Geometry {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            pad,
        })
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        range_for(kx, self.pad, self.stride, self.in_w, self.out_w)
    }

    #[inline]
    fn row_range(&self, ky: usize) -> (usize, usize) {
        range_for(ky, self.pad, self.stride, self.in_h, self.out_h)
    }
}

#[inline]
fn range_for(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= in_len - 1
    let hi = if k > in_len - 1 + pad {
        0
    } else {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(
    input: &Tensor4,
    kernels: &Tensor4,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let g = Geometry::new(input, kernels, stride, pad)?;
    if bias.len() != g.out_ch {
        return Err(Error::shape(format!(
            "conv2d: bias has {} entries for {} output channels",
            bias.len(),
            g.out_ch
        )));
    }
    let mut out = Tensor4::zeros(g.batch, g.out_ch, g.out_h, g.out_w);
    let in_data = input.data();
    let k_data = kernels.data();
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let out_data = out.data_mut();

    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out_data[(n * g.out_ch + o) * out_plane..][..out_plane];
            dst.fill(bias[o]);
            for c in 0..g.in_ch {
                let src = &in_data[(n * g.in_ch + c) * in_plane..][..in_plane];
                for ky in 0..g.k_h {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..g.k_w {
                        let w = k_data[((o * g.in_ch + c) * g.k_h + ky) * g.k_w + kx];
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let src_row = &src[iy * g.in_w..][..g.in_w];
                            let dst_row = &mut dst[oy * g.out_w..][..g.out_w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let len = ox_hi - ox_lo;
                                for (d, s) in dst_row[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&src_row[ix0..ix0 + len])
                                {
                                    *d += w * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    dst_row[ox] += w * src_row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    grad_out: &Tensor4,
    saved_input: &Tensor4,
    kernels: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = Geometry::new(saved_input, kernels, stride, pad)?;
    let expected = [g.batch, g.out_ch, g.out_h, g.out_w];
    if grad_out.dims() != expected {
        return Err(Error::shape(format!(
            "conv2d backward: grad_out {:?} does not match forward output {:?}",
            grad_out.dims(),
            expected
        )));
    }

    let mut grad_in = Tensor4::zeros(g.batch, g.in_ch, g.in_h, g.in_w);
    let mut grad_k = Tensor4::zeros(g.out_ch, g.in_ch, g.k_h, g.k_w);
    let mut grad_b = vec![0.0; g.out_ch];

    let in_data = saved_input.data();
    let k_data = kernels.data();
    let go_data = grad_out.data();
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;

    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let go = &go_data[(n * g.out_ch + o) * out_plane..][..out_plane];
            grad_b[o] += go.iter().sum::<f64>();
            for c in 0..g.in_ch {
                let src = &in_data[(n * g.in_ch + c) * in_plane..][..in_plane];
                let gi_off = (n * g.in_ch + c) * in_plane;
                for ky in 0..g.k_h {
                    let (oy_lo, oy_hi) = g.row_range(ky);
                    for kx in 0..g.k_w {
                        let k_idx = ((o * g.in_ch + c) * g.k_h + ky) * g.k_w + kx;
                        let w = k_data[k_idx];
                        let (ox_lo, ox_hi) = g.col_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let go_row = &go[oy * g.out_w..][..g.out_w];
                            let src_row = &src[iy * g.in_w..][..g.in_w];
                            let gi_row =
                                &mut grad_in.data_mut()[gi_off + iy * g.in_w..][..g.in_w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += go_row[ox] * src_row[ix];
                                gi_row[ix] += w * go_row[ox];
                            }
                        }
                        grad_k.data_mut()[k_idx] += acc;
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: grad_in,
        kernels: grad_k,
        bias: grad_b,
    })
}
