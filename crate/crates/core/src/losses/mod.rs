//! Transmission and dehazing objectives, the image-gradient operators and the
//! fixed feature extractor used by the perceptual term.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::ConvGeometry;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Epsilon inside the adversarial logarithms.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_g: f64,
    pub lambda_p: f64,
    pub enable_adv: bool,
    pub enable_grad: bool,
    pub enable_perc: bool,
    /// When off, the fusion network is guided by a constant map instead of
    /// the estimated transmission and the generator is not trained.
    pub enable_transmission_branch: bool,
    /// Divide pixel terms by the batch size and the perceptual term by the
    /// feature element count; raw sums otherwise.
    pub normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_a: 0.003,
            lambda_g: 1.0,
            lambda_p: 1.5,
            enable_adv: true,
            enable_grad: true,
            enable_perc: true,
            enable_transmission_branch: true,
            normalize: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_g", self.lambda_g),
            ("lambda_p", self.lambda_p),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Ablation configurations. The `T-` presets train and score the
/// transmission branch only; the `I-` presets add the dehazing stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "T-L2")]
    TL2,
    #[serde(rename = "T-L2-G")]
    TL2G,
    #[serde(rename = "T-L2-G-GAN")]
    TL2GGan,
    #[serde(rename = "I-L2-noT")]
    IL2NoT,
    #[serde(rename = "I-L2-T")]
    IL2T,
    #[serde(rename = "I-L2-Per-T")]
    IL2PerT,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::TL2,
        Preset::TL2G,
        Preset::TL2GGan,
        Preset::IL2NoT,
        Preset::IL2T,
        Preset::IL2PerT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TL2 => "T-L2",
            Preset::TL2G => "T-L2-G",
            Preset::TL2GGan => "T-L2-G-GAN",
            Preset::IL2NoT => "I-L2-noT",
            Preset::IL2T => "I-L2-T",
            Preset::IL2PerT => "I-L2-Per-T",
        }
    }

    /// True for the presets that include the dehazing network.
    pub fn is_image_preset(self) -> bool {
        matches!(self, Preset::IL2NoT | Preset::IL2T | Preset::IL2PerT)
    }

    /// Loss configuration of the preset with the default λ values.
    pub fn weights(self) -> LossWeights {
        let base = LossWeights::default();
        let (adv, grad, perc, branch) = match self {
            Preset::TL2 => (false, false, false, true),
            Preset::TL2G => (false, true, false, true),
            Preset::TL2GGan => (true, true, false, true),
            Preset::IL2NoT => (false, false, false, false),
            Preset::IL2T => (true, true, false, true),
            Preset::IL2PerT => (true, true, true, true),
        };
        LossWeights {
            enable_adv: adv,
            enable_grad: grad,
            enable_perc: perc,
            enable_transmission_branch: branch,
            ..base
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown preset {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

fn batch_of<T: Scalar>(g: &Graph<T>, v: Var) -> usize {
    g.value(v).shape().first().copied().unwrap_or(1).max(1)
}

fn check_same<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    g.value(a).expect_same_shape(g.value(b))
}

/// Sum of squared differences divided by the batch size (or the raw sum when
/// `normalize` is off).
pub fn euclidean_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    normalize: bool,
) -> Result<Var> {
    check_same(g, pred, target)?;
    let n = batch_of(g, pred);
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(if normalize {
        g.affine(s, T::one() / T::c(n as f64), T::zero())
    } else {
        s
    })
}

fn neg_log_mean<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let l = g.log_eps(x, T::c(LOG_EPS))?;
    let m = g.mean(l);
    Ok(g.affine(m, -T::one(), T::zero()))
}

/// Generator term: mean over the patch grid of `-ln(D(G(I)))`.
pub fn adversarial_g_loss<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    neg_log_mean(g, d_fake)
}

/// Discriminator term: mean of `-ln(D(real)) - ln(1 - D(fake))`.
pub fn adversarial_d_loss<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = neg_log_mean(g, d_real)?;
    let flipped = g.affine(d_fake, -T::one(), T::one());
    let fake = neg_log_mean(g, flipped)?;
    g.add(real, fake)
}

/// Forward differences along width and height.
pub fn gradient_ops<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
    Ok((g.diff_x(x)?, g.diff_y(x)?))
}

pub fn gradient_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    normalize: bool,
) -> Result<Var> {
    check_same(g, pred, target)?;
    let (px, py) = gradient_ops(g, pred)?;
    let (tx, ty) = gradient_ops(g, target)?;
    let lx = euclidean_loss(g, px, tx, normalize)?;
    let ly = euclidean_loss(g, py, ty, normalize)?;
    g.add(lx, ly)
}

/// Frozen convolutional feature extractor: three 3×3 conv + ReLU stages of
/// 16, 32 and 64 channels with 2×2 average pooling in between. The tap is the
/// last ReLU. Weights are He-normal from a seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

impl<T: Scalar> FeatureNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = FEATURE_CHANNELS
            .iter()
            .map(|&c| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::randn(&[c, cin, 3, 3], 0.0, std, &mut rng);
                cin = c;
                (w, Tensor::zeros(&[c]))
            })
            .collect();
        Self { layers }
    }

    /// Degenerate extractor whose features are the input itself.
    pub fn identity() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    /// Features of a batch of RGB images in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 3 {
            return Err(Error::dim(format!(
                "feature extractor expects 3 channels, got {c}"
            )));
        }
        let geom = ConvGeometry {
            stride: 1,
            padding: 1,
        };
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h)?;
            }
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(h, wv, Some(bv), geom)?;
            h = g.relu(y);
        }
        Ok(h)
    }
}

/// Squared feature distance divided by the feature element count (raw sum
/// when `normalize` is off).
pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    feat: &FeatureNet<T>,
    normalize: bool,
) -> Result<Var> {
    check_same(g, pred, target)?;
    let fp = feat.forward(g, pred)?;
    let ft = feat.forward(g, target)?;
    let n = g.value(fp).len().max(1);
    let d = g.sub(fp, ft)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(if normalize {
        g.affine(s, T::one() / T::c(n as f64), T::zero())
    } else {
        s
    })
}

/// Individual terms of an objective alongside their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub euclidean: Var,
    pub adversarial: Option<Var>,
    pub gradient: Option<Var>,
    pub perceptual: Option<Var>,
}

fn add_weighted<T: Scalar>(g: &mut Graph<T>, acc: Var, term: Var, w: f64) -> Result<Var> {
    let scaled = g.affine(term, T::c(w), T::zero());
    g.add(acc, scaled)
}

/// `L_E + λa·L_A + λG·L_G` with disabled terms dropped. `pred` and `target`
/// are transmission maps in `[0, 1]`.
pub fn transmission_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    d_fake: Option<Var>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let euclidean = euclidean_loss(g, pred, target, w.normalize)?;
    let mut total = euclidean;
    let adversarial = if w.enable_adv {
        let d = d_fake.ok_or_else(|| {
            Error::InvalidArgument(
                "adversarial term enabled but no discriminator output given".into(),
            )
        })?;
        let a = adversarial_g_loss(g, d)?;
        total = add_weighted(g, total, a, w.lambda_a)?;
        Some(a)
    } else {
        None
    };
    let gradient = if w.enable_grad {
        let l = gradient_loss(g, pred, target, w.normalize)?;
        total = add_weighted(g, total, l, w.lambda_g)?;
        Some(l)
    } else {
        None
    };
    Ok(LossTerms {
        total,
        euclidean,
        adversarial,
        gradient,
        perceptual: None,
    })
}

/// `L_E + λp·L_P` on dehazed images in `[0, 1]`.
pub fn dehazing_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    feat: Option<&FeatureNet<T>>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let euclidean = euclidean_loss(g, pred, target, w.normalize)?;
    let mut total = euclidean;
    let perceptual = if w.enable_perc {
        let f = feat.ok_or_else(|| {
            Error::InvalidArgument("perceptual term enabled but no feature extractor given".into())
        })?;
        let p = perceptual_loss(g, pred, target, f, w.normalize)?;
        total = add_weighted(g, total, p, w.lambda_p)?;
        Some(p)
    } else {
        None
    };
    Ok(LossTerms {
        total,
        euclidean,
        adversarial: None,
        gradient: None,
        perceptual,
    })
}

#[cfg(test)]
mod tests;
