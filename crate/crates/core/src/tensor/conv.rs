//! Direct convolution kernels (forward and backward).
//!
//! Convolution weights are `[out, in, k, k]`; transposed-convolution weights
//! are `[in, out, k, k]`, so one weight tensor gives a convolution and its
//! exact adjoint.

use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    if k == 0 || g.stride == 0 {
        return Err(Error::dim("kernel and stride must be at least 1"));
    }
    let padded = n + 2 * g.padding;
    if padded < k {
        return Err(Error::dim(format!(
            "padded extent {padded} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / g.stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn tconv_out_extent(n: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    if k == 0 || g.stride == 0 || n == 0 {
        return Err(Error::dim(
            "kernel, stride and input extent must be at least 1",
        ));
    }
    let full = (n - 1) * g.stride + k;
    if full <= 2 * g.padding {
        return Err(Error::dim(format!(
            "transposed convolution output would be empty (n={n}, k={k}, padding={})",
            g.padding
        )));
    }
    Ok(full - 2 * g.padding)
}

/// Range of `o` in `0..n_iter` for which `o * stride + offset` lies in `0..n_target`.
#[inline]
fn valid_range(n_iter: usize, n_target: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let top = n_target as isize - 1 - offset;
    let hi = if top < 0 {
        0
    } else {
        (top / s + 1).min(n_iter as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

fn check_square_kernel<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (a, b, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(Error::dim(format!("kernel must be square, got {kh}x{kw}")));
    }
    Ok((a, b, kh))
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let (nb, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k) = check_square_kernel(w)?;
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    check_bias(bias, cout)?;
    let ho = conv_out_extent(h, k, g)?;
    let wo = conv_out_extent(wd, k, g)?;
    let mut out = Tensor::zeros(&[nb, cout, ho, wo]);
    let (xs, ws) = (x.data(), w.data());
    let s = g.stride;
    let p = g.padding as isize;
    for_each_chunk(out.data_mut(), ho * wo, |plane, o| {
        let (b, co) = (plane / cout, plane % cout);
        if let Some(bias) = bias {
            o.fill(bias.data()[co]);
        }
        for ci in 0..cin {
            let xp = &xs[(b * cin + ci) * h * wd..][..h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, s, ky as isize - p);
                for kx in 0..k {
                    let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(wo, wd, s, kx as isize - p);
                    for oy in oy0..oy1 {
                        let iy = (oy * s + ky) - g.padding;
                        let xrow = &xp[iy * wd..];
                        let orow = &mut o[oy * wo..];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * s + kx - g.padding];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (nb, cin, h, wd) = x.dims4()?;
    let (cout, _, k) = check_square_kernel(w)?;
    let (_, _, ho, wo) = gout.dims4()?;
    let (xs, ws, gs) = (x.data(), w.data(), gout.data());
    let s = g.stride;
    let p = g.padding as isize;

    let mut gx = Tensor::zeros(x.shape());
    for_each_chunk(gx.data_mut(), h * wd, |plane, gxp| {
        let (b, ci) = (plane / cin, plane % cin);
        for co in 0..cout {
            let gp = &gs[(b * cout + co) * ho * wo..][..ho * wo];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, s, ky as isize - p);
                for kx in 0..k {
                    let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(wo, wd, s, kx as isize - p);
                    for oy in oy0..oy1 {
                        let iy = (oy * s + ky) - g.padding;
                        let grow = &gp[oy * wo..];
                        let xrow = &mut gxp[iy * wd..];
                        for ox in ox0..ox1 {
                            xrow[ox * s + kx - g.padding] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });

    let mut gw = Tensor::zeros(w.shape());
    for_each_chunk(gw.data_mut(), cin * k * k, |co, gwc| {
        for ci in 0..cin {
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, s, ky as isize - p);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(wo, wd, s, kx as isize - p);
                    let mut acc = T::zero();
                    for b in 0..nb {
                        let xp = &xs[(b * cin + ci) * h * wd..][..h * wd];
                        let gp = &gs[(b * cout + co) * ho * wo..][..ho * wo];
                        for oy in oy0..oy1 {
                            let iy = (oy * s + ky) - g.padding;
                            let xrow = &xp[iy * wd..];
                            let grow = &gp[oy * wo..];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * xrow[ox * s + kx - g.padding];
                            }
                        }
                    }
                    gwc[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let gb = channel_sums(gout)?;
    Ok((gx, gw, gb))
}

pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let (nb, cin, h, wd) = x.dims4()?;
    let (wcin, cout, k) = check_square_kernel(w)?;
    if wcin != cin {
        return Err(Error::dim(format!(
            "transpose_conv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    check_bias(bias, cout)?;
    let ho = tconv_out_extent(h, k, g)?;
    let wo = tconv_out_extent(wd, k, g)?;
    let mut out = Tensor::zeros(&[nb, cout, ho, wo]);
    let (xs, ws) = (x.data(), w.data());
    let s = g.stride;
    let p = g.padding as isize;
    for_each_chunk(out.data_mut(), ho * wo, |plane, o| {
        let (b, co) = (plane / cout, plane % cout);
        if let Some(bias) = bias {
            o.fill(bias.data()[co]);
        }
        for ci in 0..cin {
            let xp = &xs[(b * cin + ci) * h * wd..][..h * wd];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(h, ho, s, ky as isize - p);
                for kx in 0..k {
                    let wv = ws[((ci * cout + co) * k + ky) * k + kx];
                    let (ix0, ix1) = valid_range(wd, wo, s, kx as isize - p);
                    for iy in iy0..iy1 {
                        let oy = (iy * s + ky) - g.padding;
                        let xrow = &xp[iy * wd..];
                        let orow = &mut o[oy * wo..];
                        for ix in ix0..ix1 {
                            orow[ix * s + kx - g.padding] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (nb, cin, h, wd) = x.dims4()?;
    let (_, cout, k) = check_square_kernel(w)?;
    let (_, _, ho, wo) = gout.dims4()?;
    let (xs, ws, gs) = (x.data(), w.data(), gout.data());
    let s = g.stride;
    let p = g.padding as isize;

    let mut gx = Tensor::zeros(x.shape());
    for_each_chunk(gx.data_mut(), h * wd, |plane, gxp| {
        let (b, ci) = (plane / cin, plane % cin);
        for co in 0..cout {
            let gp = &gs[(b * cout + co) * ho * wo..][..ho * wo];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(h, ho, s, ky as isize - p);
                for kx in 0..k {
                    let wv = ws[((ci * cout + co) * k + ky) * k + kx];
                    let (ix0, ix1) = valid_range(wd, wo, s, kx as isize - p);
                    for iy in iy0..iy1 {
                        let oy = (iy * s + ky) - g.padding;
                        let grow = &gp[oy * wo..];
                        let xrow = &mut gxp[iy * wd..];
                        for ix in ix0..ix1 {
                            xrow[ix] += wv * grow[ix * s + kx - g.padding];
                        }
                    }
                }
            }
        }
    });

    let mut gw = Tensor::zeros(w.shape());
    for_each_chunk(gw.data_mut(), cout * k * k, |ci, gwc| {
        for co in 0..cout {
            for ky in 0..k {
                let (iy0, iy1) = valid_range(h, ho, s, ky as isize - p);
                for kx in 0..k {
                    let (ix0, ix1) = valid_range(wd, wo, s, kx as isize - p);
                    let mut acc = T::zero();
                    for b in 0..nb {
                        let xp = &xs[(b * cin + ci) * h * wd..][..h * wd];
                        let gp = &gs[(b * cout + co) * ho * wo..][..ho * wo];
                        for iy in iy0..iy1 {
                            let oy = (iy * s + ky) - g.padding;
                            let xrow = &xp[iy * wd..];
                            let grow = &gp[oy * wo..];
                            for ix in ix0..ix1 {
                                acc += xrow[ix] * grow[ix * s + kx - g.padding];
                            }
                        }
                    }
                    gwc[(co * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let gb = channel_sums(gout)?;
    Ok((gx, gw, gb))
}

/// Per-channel sum over batch and spatial axes of a rank-4 tensor.
pub fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (nb, c, h, w) = t.dims4()?;
    let mut out = vec![T::zero(); c];
    for b in 0..nb {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * h * w;
            *acc += t.data()[start..start + h * w].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out)
}
