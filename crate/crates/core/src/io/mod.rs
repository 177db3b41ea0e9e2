//! PNG images, dataset manifests and run configuration.

pub mod config;
pub mod manifest;

pub use config::{DataConfig, Overrides, PathsConfig, RunConfig, SplitData};
pub use manifest::{write_split, Manifest, ManifestHeader, ManifestRecord};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::htf::write_atomic;
use crate::tensor::Tensor;
use image::{ImageFormat, RgbImage};
use std::io::Cursor;
use std::path::Path;

/// `round(255·x)` after clamping to `[0, 1]`; NaN maps to 0.
pub fn quantize(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes an 8-bit PNG into a `[3, H, W]` tensor in `[0, 1]`. Grayscale
/// and alpha images are converted to RGB.
pub fn decode_png<T: Scalar>(bytes: &[u8], name: &str) -> Result<Tensor<T>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{name}: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        T::c(raw[(k % n) * 3 + k / n] as f64 / 255.0)
    }))
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, &path.display().to_string())
}

/// Encodes `[3, H, W]` as RGB or `[1, H, W]` / `[H, W]` as gray replicated
/// to RGB.
pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [h, w] => (1, h, w),
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => {
            return Err(Error::dim(format!(
                "cannot write {:?} as an image",
                img.shape()
            )))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::dim("cannot write an empty image"));
    }
    let n = h * w;
    let mut raw = Vec::with_capacity(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            let src = if c == 1 { i } else { ch * n + i };
            raw.push(quantize(img.data()[src].f64()));
        }
    }
    let buf = RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::dim("image buffer size"))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

/// Writes a PNG atomically, so a failed save leaves no partial file.
pub fn save_image<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

/// Places equally tall `[C, H, W]` panels (`C` of 1 or 3) side by side with a
/// 2-pixel white gutter; single-channel panels are shown in gray.
pub fn contact_sheet<T: Scalar>(panels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const GUTTER: usize = 2;
    let dims: Vec<(usize, usize, usize)> =
        panels.iter().map(|p| p.dims3()).collect::<Result<_>>()?;
    let h = dims
        .first()
        .map(|d| d.1)
        .ok_or_else(|| Error::InvalidArgument("no panels".into()))?;
    if dims
        .iter()
        .any(|&(c, ph, _)| ph != h || !(c == 1 || c == 3))
    {
        return Err(Error::dim(
            "contact sheet panels need equal height and 1 or 3 channels",
        ));
    }
    let w: usize = dims.iter().map(|d| d.2).sum::<usize>() + GUTTER * (panels.len() - 1);
    let mut out = Tensor::full(&[3, h, w], T::one());
    let mut x0 = 0;
    for (p, &(c, _, pw)) in panels.iter().zip(&dims) {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            for y in 0..h {
                for x in 0..pw {
                    out.data_mut()[(ch * h + y) * w + x0 + x] = p.data()[(src * h + y) * pw + x];
                }
            }
        }
        x0 += pw + GUTTER;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
