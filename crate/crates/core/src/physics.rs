//! Atmospheric scattering model: `I = J·t + A·(1 − t)` with `t = exp(−β·d)`.
//!
//! Images are `[3, H, W]` tensors in `[0, 1]`; depth and transmission maps are
//! `[1, H, W]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default lower bound on `t` when inverting the model.
pub const DEFAULT_T_FLOOR: f64 = 0.05;

/// Atmospheric light: one value per RGB channel, or a full `[3, H, W]` map.
#[derive(Clone, Debug, PartialEq)]
pub enum AirLight<T> {
    Uniform([T; 3]),
    Map(Tensor<T>),
}

impl<T: Scalar> AirLight<T> {
    pub fn gray(v: T) -> Self {
        AirLight::Uniform([v; 3])
    }

    #[inline]
    fn at(&self, c: usize, i: usize) -> T {
        match self {
            AirLight::Uniform(a) => a[c],
            AirLight::Map(m) => m.data()[c * (m.len() / 3) + i],
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if let AirLight::Map(m) = self {
            if m.shape() != [3, h, w] {
                return Err(Error::dim(format!(
                    "airlight map {:?} does not match image {h}x{w}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Per-channel values of a uniform airlight, or the channel means of a map.
    pub fn channel_values(&self) -> [T; 3] {
        match self {
            AirLight::Uniform(a) => *a,
            AirLight::Map(m) => {
                let n = m.len() / 3;
                let mut out = [T::zero(); 3];
                for (c, o) in out.iter_mut().enumerate() {
                    *o = m.data()[c * n..(c + 1) * n].iter().copied().sum::<T>() / T::c(n as f64);
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams<T> {
    pub airlight: AirLight<T>,
    /// Scattering coefficient per unit of normalized depth.
    pub beta: T,
}

/// Scene depth normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T>(Tensor<T>);

impl<T: Scalar> DepthMap<T> {
    /// Wraps a `[1, H, W]` (or `[H, W]`) map already in `[0, 1]`.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let t = as_single_channel(t)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("depth map".into()));
        }
        if t.min_value() < T::zero() || t.max_value() > T::one() {
            return Err(Error::InvalidArgument(
                "depth map must lie in [0, 1]; use DepthMap::normalize for raw depth".into(),
            ));
        }
        Ok(Self(t))
    }

    /// Scales raw nonnegative depth by its maximum so that the farthest point is 1.
    pub fn normalize(raw: Tensor<T>) -> Result<Self> {
        let raw = as_single_channel(raw)?;
        if !raw.all_finite() {
            return Err(Error::NonFinite("depth map".into()));
        }
        if raw.min_value() < T::zero() {
            return Err(Error::InvalidArgument("negative depth".into()));
        }
        let max = raw.max_value();
        let t = if max > T::zero() {
            raw.map(|v| v / max)
        } else {
            raw
        };
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Per-pixel transmission in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap<T>(Tensor<T>);

impl<T: Scalar> TransmissionMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let t = as_single_channel(t)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("transmission map".into()));
        }
        Ok(Self(t))
    }

    pub fn uniform(h: usize, w: usize, v: T) -> Self {
        Self(Tensor::full(&[1, h, w], v))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

fn as_single_channel<T: Scalar>(t: Tensor<T>) -> Result<Tensor<T>> {
    match *t.shape() {
        [h, w] => t.reshape(&[1, h, w]),
        [1, _, _] => Ok(t),
        _ => Err(Error::dim(format!(
            "expected a [1,H,W] map, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_image_vs_map<T: Scalar>(
    img: &Tensor<T>,
    t: &TransmissionMap<T>,
) -> Result<(usize, usize)> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!(
            "expected an RGB image, got {c} channels"
        )));
    }
    if t.dims() != (h, w) {
        return Err(Error::dim(format!(
            "image is {h}x{w} but transmission map is {:?}",
            t.dims()
        )));
    }
    Ok((h, w))
}

/// `t(x) = exp(−β·d(x))`.
pub fn depth_to_transmission<T: Scalar>(d: &DepthMap<T>, beta: T) -> Result<TransmissionMap<T>> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if !d.tensor().all_finite() {
        return Err(Error::NonFinite("depth map".into()));
    }
    Ok(TransmissionMap(d.tensor().map(|v| (-beta * v).exp())))
}

/// Hazy image and the number of channel values that had to be clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized<T> {
    pub image: Tensor<T>,
    pub clamped: usize,
}

/// Applies the scattering model, clamping the result to `[0, 1]`.
pub fn synthesize_hazy<T: Scalar>(
    clear: &Tensor<T>,
    t: &TransmissionMap<T>,
    airlight: &AirLight<T>,
) -> Result<Synthesized<T>> {
    let (h, w) = check_image_vs_map(clear, t)?;
    airlight.check(h, w)?;
    let n = h * w;
    let mut out = clear.clone();
    let mut clamped = 0;
    for c in 0..3 {
        for i in 0..n {
            let tv = t.tensor().data()[i];
            let v = clear.data()[c * n + i] * tv + airlight.at(c, i) * (T::one() - tv);
            let cv = v.max(T::zero()).min(T::one());
            if cv != v {
                clamped += 1;
            }
            out.data_mut()[c * n + i] = cv;
        }
    }
    Ok(Synthesized {
        image: out,
        clamped,
    })
}

/// `J = (I − A·(1 − t)) / max(t, t_floor)`, clamped to `[0, 1]`.
pub fn invert_closed_form<T: Scalar>(
    hazy: &Tensor<T>,
    t: &TransmissionMap<T>,
    airlight: &AirLight<T>,
    t_floor: T,
) -> Result<Tensor<T>> {
    if !(t_floor > T::zero()) {
        return Err(Error::InvalidArgument("t_floor must be positive".into()));
    }
    let (h, w) = check_image_vs_map(hazy, t)?;
    airlight.check(h, w)?;
    let n = h * w;
    let mut out = hazy.clone();
    for c in 0..3 {
        for i in 0..n {
            let tv = t.tensor().data()[i];
            let a = airlight.at(c, i);
            let v = (hazy.data()[c * n + i] - a * (T::one() - tv)) / tv.max(t_floor);
            out.data_mut()[c * n + i] = v.max(T::zero()).min(T::one());
        }
    }
    Ok(out)
}
