//! Dark-channel-prior dehazing with a box window (no matting refinement).

use crate::error::{Error, Result};
use crate::physics::{invert_closed_form, AirLight, TransmissionMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcpOptions {
    pub window: usize,
    pub omega: f64,
    /// Fraction of the brightest dark-channel pixels used to estimate `A`.
    pub top_fraction: f64,
    pub t_floor: f64,
}

impl Default for DcpOptions {
    fn default() -> Self {
        Self {
            window: 15,
            omega: 0.95,
            top_fraction: 0.001,
            t_floor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcpResult<T> {
    pub dehazed: Tensor<T>,
    pub transmission: TransmissionMap<T>,
    pub airlight: [T; 3],
}

/// Sliding minimum over a `window` (clamped at the borders), rows then columns.
fn min_filter(src: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (lo, hi) = (j.saturating_sub(r), (j + r).min(w - 1));
            rows[i * w + j] = src[i * w + lo..=i * w + hi]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let (lo, hi) = (i.saturating_sub(r), (i + r).min(h - 1));
        for j in 0..w {
            out[i * w + j] = (lo..=hi)
                .map(|t| rows[t * w + j])
                .fold(f64::INFINITY, f64::min);
        }
    }
    out
}

fn rgb_dims<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    let (c, h, w) = img.dims3()?;
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "expected a non-empty RGB image, got {:?}",
            img.shape()
        )));
    }
    Ok((h, w))
}

/// Windowed minimum over pixels and channels of `img / A`, as a flat `h·w` buffer.
pub fn dark_channel<T: Scalar>(
    img: &Tensor<T>,
    airlight: [T; 3],
    window: usize,
) -> Result<Vec<f64>> {
    let (h, w) = rgb_dims(img)?;
    if window == 0 {
        return Err(Error::InvalidArgument(
            "dark channel window must be at least 1".into(),
        ));
    }
    if airlight.iter().any(|a| !(a.f64() > 0.0)) {
        return Err(Error::InvalidArgument("airlight must be positive".into()));
    }
    let n = h * w;
    let per_pixel: Vec<f64> = (0..n)
        .map(|i| {
            (0..3)
                .map(|c| img.data()[c * n + i].f64() / airlight[c].f64())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(min_filter(&per_pixel, h, w, window))
}

/// `t = 1 − ω·dark(I / A)`.
pub fn dcp_transmission<T: Scalar>(
    img: &Tensor<T>,
    airlight: [T; 3],
    window: usize,
    omega: f64,
) -> Result<TransmissionMap<T>> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "omega must be in (0, 1], got {omega}"
        )));
    }
    let (h, w) = rgb_dims(img)?;
    let dark = dark_channel(img, airlight, window)?;
    let t = Tensor::from_fn(&[1, h, w], |i| {
        T::c((1.0 - omega * dark[i]).clamp(1.0 - omega, 1.0))
    });
    TransmissionMap::new(t)
}

/// Per-channel mean of the pixels whose dark channel is among the brightest
/// `top_fraction` (at least one pixel). Every pixel tied with the cut-off
/// value is included, so the estimate does not depend on scan order.
pub fn dcp_atmospheric_light<T: Scalar>(
    img: &Tensor<T>,
    window: usize,
    top_fraction: f64,
) -> Result<[T; 3]> {
    let (h, w) = rgb_dims(img)?;
    let n = h * w;
    let dark = dark_channel(img, [T::one(); 3], window)?;
    let k = ((top_fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
    let mut sorted = dark.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cut = sorted[k - 1];
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (i, &d) in dark.iter().enumerate() {
        if d >= cut {
            count += 1;
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.data()[c * n + i].f64();
            }
        }
    }
    Ok(sum.map(|s| T::c(s / count as f64)))
}

/// Estimates `A` and `t`, then inverts the scattering model.
pub fn dcp_dehaze<T: Scalar>(img: &Tensor<T>, opts: &DcpOptions) -> Result<DcpResult<T>> {
    let a = dcp_atmospheric_light(img, opts.window, opts.top_fraction)?;
    // A dark image can give a zero estimate; keep the division defined.
    let a = a.map(|v| v.max(T::c(1e-6)));
    let t = dcp_transmission(img, a, opts.window, opts.omega)?;
    let dehazed = invert_closed_form(img, &t, &AirLight::Uniform(a), T::c(opts.t_floor))?;
    Ok(DcpResult {
        dehazed,
        transmission: t,
        airlight: a,
    })
}
