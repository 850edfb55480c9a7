//! Direct 2-D convolution kernels over flat NCHW buffers.
//!
//! All three kernels walk the same `(n, co, ci, ky, kx, oy, ox)` nest in a
//! fixed order, so results are bit-reproducible. Transposed convolution is
//! expressed through these: its forward pass is `backward_input` and its
//! input gradient is `forward`.

use super::{Result, TensorError};

/// `floor((len + 2*pad - k) / stride) + 1`, or an error when the kernel does
/// not fit the padded input.
pub fn conv2d_output_size(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    check_hyper("conv2d", k, stride)?;
    if len + 2 * pad < k {
        return Err(TensorError::Domain {
            op: "conv2d",
            detail: format!("kernel {k} larger than padded input {}", len + 2 * pad),
        });
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// `(len - 1) * stride - 2*pad + k`, or an error when that is not positive.
pub fn conv_transpose2d_output_size(
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    check_hyper("conv_transpose2d", k, stride)?;
    let full = (len - 1) * stride + k;
    if full <= 2 * pad {
        return Err(TensorError::Domain {
            op: "conv_transpose2d",
            detail: format!("output size {full} - 2*{pad} is not positive"),
        });
    }
    Ok(full - 2 * pad)
}

fn check_hyper(op: &'static str, k: usize, stride: usize) -> Result<()> {
    if k == 0 || stride == 0 {
        return Err(TensorError::Domain {
            op,
            detail: format!("kernel ({k}) and stride ({stride}) must be >= 1"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output indices `o` in `lo..hi` for which `o*stride + off - pad` lands in `0..in_len`.
#[inline]
fn valid_range(off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    if in_len + pad <= off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// `y[n,co] = b[co] + sum_ci x[n,ci] * w[co,ci]` with `w` laid out `[cout, cin, k, k]`.
pub(crate) fn forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let ConvGeom { n, cin, cout, h, w: wd, oh, ow, k, stride, pad } = *g;
    let mut y = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let out = &mut y[(b * cout + co) * oh * ow..][..oh * ow];
            if let Some(bias) = bias {
                out.fill(bias[co]);
            }
            for ci in 0..cin {
                let plane = &x[(b * cin + ci) * h * wd..][..h * wd];
                let kern = &w[(co * cin + ci) * k * k..][..k * k];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, ow);
                        let wv = kern[ky * k + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let row = &plane[iy * wd..][..wd];
                            let orow = &mut out[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of `forward` with respect to its input: scatters `gy` back through `w`.
pub(crate) fn backward_input(g: &ConvGeom, gy: &[f32], w: &[f32]) -> Vec<f32> {
    let ConvGeom { n, cin, cout, h, w: wd, oh, ow, k, stride, pad } = *g;
    let mut gx = vec![0.0f32; n * cin * h * wd];
    for b in 0..n {
        for co in 0..cout {
            let gplane = &gy[(b * cout + co) * oh * ow..][..oh * ow];
            for ci in 0..cin {
                let dst = &mut gx[(b * cin + ci) * h * wd..][..h * wd];
                let kern = &w[(co * cin + ci) * k * k..][..k * k];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, ow);
                        let wv = kern[ky * k + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..][..ow];
                            let drow = &mut dst[iy * wd..][..wd];
                            for ox in ox0..ox1 {
                                drow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `forward` with respect to the `[cout, cin, k, k]` weight.
pub(crate) fn backward_weight(g: &ConvGeom, x: &[f32], gy: &[f32]) -> Vec<f32> {
    let ConvGeom { n, cin, cout, h, w: wd, oh, ow, k, stride, pad } = *g;
    let mut gw = vec![0.0f32; cout * cin * k * k];
    for b in 0..n {
        for co in 0..cout {
            let gplane = &gy[(b * cout + co) * oh * ow..][..oh * ow];
            for ci in 0..cin {
                let plane = &x[(b * cin + ci) * h * wd..][..h * wd];
                let kern = &mut gw[(co * cin + ci) * k * k..][..k * k];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(kx, pad, stride, wd, ow);
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let row = &plane[iy * wd..][..wd];
                            let grow = &gplane[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * stride + kx - pad];
                            }
                        }
                        kern[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Per-channel sum of `gy` over batch and space.
pub(crate) fn backward_bias(n: usize, c: usize, plane: usize, gy: &[f32]) -> Vec<f32> {
    let mut gb = vec![0.0f32; c];
    for b in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            *acc += gy[(b * c + ch) * plane..][..plane].iter().sum::<f32>();
        }
    }
    gb
}
