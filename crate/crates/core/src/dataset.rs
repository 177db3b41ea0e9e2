//! Synthetic hazy dataset generation from clear image + depth pairs.

use crate::error::{Error, Result};
use crate::physics::{
    depth_to_transmission, synthesize_hazy, AirLight, DepthMap, HazeParams, TransmissionMap,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One clear RGB image and (optionally) its depth; missing depth is an error
/// at generation time.
#[derive(Clone, Debug)]
pub struct ClearDepthPair<T> {
    pub id: String,
    pub clear: Tensor<T>,
    pub depth: Option<DepthMap<T>>,
}

#[derive(Clone, Debug)]
pub struct SceneSample<T> {
    pub id: String,
    /// Id of the clear image this sample was derived from.
    pub source_id: String,
    pub clear: Tensor<T>,
    pub hazy: Tensor<T>,
    pub params: HazeParams<T>,
    pub depth: DepthMap<T>,
    pub transmission: TransmissionMap<T>,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazeSampling {
    pub per_image_draws: usize,
    pub airlight_range: (f64, f64),
    pub beta_range: (f64, f64),
    /// Draw an independent airlight per RGB channel instead of one gray value.
    pub per_channel_airlight: bool,
    pub seed: u64,
}

impl Default for HazeSampling {
    fn default() -> Self {
        Self {
            per_image_draws: 4,
            airlight_range: (0.5, 1.2),
            beta_range: (0.4, 1.6),
            per_channel_airlight: false,
            seed: 0,
        }
    }
}

impl HazeSampling {
    pub fn validate(&self) -> Result<()> {
        if self.per_image_draws == 0 {
            return Err(Error::Config("per_image_draws must be at least 1".into()));
        }
        let (a0, a1) = self.airlight_range;
        let (b0, b1) = self.beta_range;
        if !(a0 <= a1) || a0 < 0.0 {
            return Err(Error::Config(format!("bad airlight range {a0}..{a1}")));
        }
        if !(b0 <= b1) || b0 <= 0.0 {
            return Err(Error::Config(format!("bad beta range {b0}..{b1}")));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one `(A, β)` pair from the configured ranges.
pub fn sample_params<T: Scalar, R: Rng>(rng: &mut R, cfg: &HazeSampling) -> HazeParams<T> {
    let airlight = if cfg.per_channel_airlight {
        AirLight::Uniform([0; 3].map(|_| T::c(uniform(rng, cfg.airlight_range))))
    } else {
        AirLight::gray(T::c(uniform(rng, cfg.airlight_range)))
    };
    HazeParams {
        airlight,
        beta: T::c(uniform(rng, cfg.beta_range)),
    }
}

/// Produces `per_image_draws` hazy samples per clear image, in input order.
pub fn generate_dataset<T: Scalar>(
    pairs: &[ClearDepthPair<T>],
    cfg: &HazeSampling,
) -> Result<Vec<SceneSample<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(pairs.len() * cfg.per_image_draws);
    for pair in pairs {
        let depth = pair
            .depth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("image {} has no depth map", pair.id)))?;
        for k in 0..cfg.per_image_draws {
            let params: HazeParams<T> = sample_params(&mut rng, cfg);
            let transmission = depth_to_transmission(depth, params.beta)?;
            let syn = synthesize_hazy(&pair.clear, &transmission, &params.airlight)?;
            out.push(SceneSample {
                id: format!("{}_h{k}", pair.id),
                source_id: pair.id.clone(),
                clear: pair.clear.clone(),
                hazy: syn.image,
                params,
                depth: depth.clone(),
                transmission,
                clamped: syn.clamped,
            });
        }
    }
    Ok(out)
}

/// Partitions image ids into disjoint `(train, test)` sets; the test share is
/// `round(test_fraction · n)`, at least one image when `test_fraction > 0`.
pub fn split_ids(ids: &[String], test_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5711);
    shuffled.shuffle(&mut rng);
    let mut n_test = (test_fraction.clamp(0.0, 1.0) * shuffled.len() as f64).round() as usize;
    if test_fraction > 0.0 && n_test == 0 && !shuffled.is_empty() {
        n_test = 1;
    }
    let mut test: Vec<String> = shuffled[..n_test].to_vec();
    let mut train: Vec<String> = shuffled[n_test..].to_vec();
    test.sort();
    train.sort();
    (train, test)
}

/// Procedural indoor-like scene: a back wall, a receding floor and a few boxes
/// standing on it, with depth normalized so the back wall is at 1.
pub fn procedural_scene<T: Scalar, R: Rng>(
    id: &str,
    size: usize,
    rng: &mut R,
) -> ClearDepthPair<T> {
    let (h, w) = (size, size);
    let hf = h as f64;
    let horizon = (rng.random_range(0.35..0.55) * hf) as usize;
    let near = rng.random_range(0.05..0.2);
    let mut depth = vec![1.0f64; h * w];
    let mut rgb = vec![[0.0f64; 3]; h * w];

    let wall = Surface::random(rng);
    let floor = Surface::random(rng);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if y < horizon {
                depth[i] = 1.0 - 0.05 * ((x as f64 / w as f64) - 0.5).abs();
                rgb[i] = wall.shade(x, y);
            } else {
                let s = (y - horizon) as f64 / (h - 1 - horizon).max(1) as f64;
                depth[i] = 1.0 - s * (1.0 - near);
                rgb[i] = floor.shade(x, y);
            }
        }
    }

    let mut boxes: Vec<(usize, usize, usize, usize)> = (0..rng.random_range(2..=5))
        .map(|_| {
            let bw = rng.random_range(w / 8..=w / 3).max(2);
            let bh = rng.random_range(h / 8..=h / 2).max(2);
            let x0 = rng.random_range(0..w - bw);
            let y1 = rng.random_range(horizon + 1..=h);
            (x0, y1.saturating_sub(bh), bw, y1)
        })
        .collect();
    // Painter's order: farthest (smallest bottom row) first.
    boxes.sort_by_key(|b| b.3);
    for (x0, y0, bw, y1) in boxes {
        let s = (y1 - 1 - horizon) as f64 / (h - 1 - horizon).max(1) as f64;
        let d = (1.0 - s * (1.0 - near)).max(near);
        let surf = Surface::random(rng);
        for y in y0..y1 {
            for x in x0..x0 + bw {
                let i = y * w + x;
                depth[i] = d;
                let edge = y == y0 || y + 1 == y1 || x == x0 || x + 1 == x0 + bw;
                rgb[i] = if edge { [0.03; 3] } else { surf.shade(x, y) };
            }
        }
    }

    let n = h * w;
    let clear = Tensor::from_fn(&[3, h, w], |k| T::c(rgb[k % n][k / n].clamp(0.0, 1.0)));
    let depth = DepthMap::new(Tensor::from_fn(&[1, h, w], |k| T::c(depth[k]))).ok();
    ClearDepthPair {
        id: id.to_string(),
        clear,
        depth,
    }
}

struct Surface {
    base: [f64; 3],
    amp: f64,
    freq: (f64, f64),
    phase: f64,
}

impl Surface {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut base = [0.0; 3].map(|_| rng.random_range(0.1..0.9));
        // Saturated colours keep the clear-scene dark channel low.
        base[rng.random_range(0..3)] *= 0.15;
        Self {
            base,
            amp: rng.random_range(0.05..0.2),
            freq: (rng.random_range(0.1..0.8), rng.random_range(0.1..0.8)),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn shade(&self, x: usize, y: usize) -> [f64; 3] {
        let v = (self.freq.0 * x as f64 + self.phase).sin() * (self.freq.1 * y as f64).cos();
        self.base.map(|b| b * (1.0 + self.amp * v * 2.0))
    }
}
