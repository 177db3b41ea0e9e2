//! SSIM, the dark-channel-prior baseline and checkpoint evaluation.

mod dcp;
mod eval;

pub use dcp::{
    dark_channel, dcp_atmospheric_light, dcp_dehaze, dcp_transmission, DcpOptions, DcpResult,
};
pub use eval::{evaluate, score_sample, EvalReport, EvalRow, EVAL_CSV_HEADER};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        let s = &src[i * w..][..w];
        for j in 0..wo {
            rows[i * wo + j] = k.iter().zip(&s[j..j + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / n as f64
}

/// Mean SSIM of two images with values in `[0, 1]`, shaped `[H, W]` or
/// `[C, H, W]` (channel-averaged), over all valid 11×11 window positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::dim(format!(
                "ssim expects [H,W] or [C,H,W], got {:?}",
                a.shape()
            )))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::dim(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * n..][..n].iter().map(|v| v.f64()).collect();
        let pb: Vec<f64> = b.data()[ch * n..][..n].iter().map(|v| v.f64()).collect();
        total += ssim_plane(&pa, &pb, h, w, &k);
    }
    Ok(total / c as f64)
}
