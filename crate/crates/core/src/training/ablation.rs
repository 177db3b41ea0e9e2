//! Six-preset ablation grid: identical seed and data for every preset,
//! scored on a held-out split.

use super::{LossRecord, Sample, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::losses::Preset;
use crate::metrics::{evaluate, ssim, EvalReport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fmt::Write as _;

/// Full-scale transmission SSIM for `Input`, `T-L2`, `T-L2-G`, `T-L2-G-GAN`.
pub const REFERENCE_TRANSMISSION: [f64; 4] = [0.4523, 0.9052, 0.9257, 0.9388];
/// Full-scale dehazed SSIM for `Input`, `I-L2-noT`, `I-L2-T`, `I-L2-Per-T`.
pub const REFERENCE_IMAGE: [f64; 4] = [0.7041, 0.8835, 0.9002, 0.9133];

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub preset: Preset,
    pub stage1: Vec<LossRecord>,
    pub stage2: Vec<LossRecord>,
    pub report: EvalReport,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct AblationResult {
    /// Completed presets in run order.
    pub entries: Vec<AblationEntry>,
    /// The preset that aborted the grid, if any.
    pub failure: Option<(Preset, Error)>,
    /// Mean SSIM of the hazy input against the clear image.
    pub input_image: f64,
    /// Mean SSIM of the hazy input's channel mean against the true transmission.
    pub input_transmission: f64,
}

/// Channel-mean of a `[3,H,W]` image scored against a `[1,H,W]` map.
fn luminance_ssim<T: Scalar>(img: &Tensor<T>, t: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = img.dims3()?;
    let n = h * w;
    let inv = T::c(1.0 / c as f64);
    let lum = Tensor::from_fn(&[h, w], |i| {
        (0..c).fold(T::zero(), |s, k| s + img.data()[k * n + i]) * inv
    });
    ssim(&lum, &t.clone().reshape(&[h, w])?)
}

/// Trains every preset in `presets` from `base` (only the loss weights
/// change) and evaluates each on `test`. Transmission presets run stage 1
/// only. A failing preset stops the grid; earlier entries are kept.
pub fn run_ablation_grid<T: Scalar>(
    base: &TrainConfig,
    presets: &[Preset],
    train: &[Sample<T>],
    test: &[Sample<T>],
) -> Result<AblationResult> {
    if test.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation test split is empty".into(),
        ));
    }
    let mut input_image = 0.0;
    let mut input_transmission = 0.0;
    for s in test {
        input_image += ssim(&s.hazy, &s.clear)?;
        input_transmission += luminance_ssim(&s.hazy, &s.transmission)?;
    }
    let n = test.len() as f64;
    let mut out = AblationResult {
        entries: Vec::new(),
        failure: None,
        input_image: input_image / n,
        input_transmission: input_transmission / n,
    };
    for &preset in presets {
        match run_preset(base, preset, train, test) {
            Ok(e) => out.entries.push(e),
            Err(e) => {
                out.failure = Some((preset, e));
                break;
            }
        }
    }
    Ok(out)
}

fn run_preset<T: Scalar>(
    base: &TrainConfig,
    preset: Preset,
    train: &[Sample<T>],
    test: &[Sample<T>],
) -> Result<AblationEntry> {
    let start = std::time::Instant::now();
    let cfg = TrainConfig {
        loss: preset.weights(),
        ..base.clone()
    };
    let mut tr = Trainer::<T>::new(cfg)?;
    let stage1 = tr.run_stage1(train)?;
    let stage2 = if preset.is_image_preset() {
        tr.run_stage2(train)?
    } else {
        Vec::new()
    };
    for r in stage1.iter().chain(&stage2) {
        if !r.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "{preset} loss at iteration {}",
                r.iter
            )));
        }
    }
    let (report, _) = evaluate(&mut tr, test, preset.name())?;
    Ok(AblationEntry {
        preset,
        stage1,
        stage2,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

impl AblationResult {
    pub fn entry(&self, preset: Preset) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.preset == preset)
    }

    fn table(
        &self,
        title: &str,
        input: f64,
        presets: &[Preset],
        reference: &[f64; 4],
        score: fn(&EvalReport) -> f64,
    ) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<22}{:>10}", title, "Input");
        for p in presets {
            let _ = write!(s, "{:>12}", p.name());
        }
        let _ = writeln!(s, "{:>10}", "Target");
        let _ = write!(s, "{:<22}{:>10.4}", "desk", input);
        for &p in presets {
            match self.entry(p) {
                Some(e) => {
                    let _ = write!(s, "{:>12.4}", score(&e.report));
                }
                None => {
                    let _ = write!(s, "{:>12}", "-");
                }
            }
        }
        let _ = writeln!(s, "{:>10.4}", 1.0);
        let _ = write!(s, "{:<22}", "full-scale reference");
        for (i, v) in reference.iter().enumerate() {
            let _ = write!(s, "{:>width$.4}", v, width = if i == 0 { 10 } else { 12 });
        }
        let _ = writeln!(s, "{:>10.4}", 1.0);
        s
    }

    /// Transmission-map SSIM for the three transmission presets.
    pub fn transmission_table(&self) -> String {
        self.table(
            "Transmission map",
            self.input_transmission,
            &[Preset::TL2, Preset::TL2G, Preset::TL2GGan],
            &REFERENCE_TRANSMISSION,
            |r| r.means().ssim_transmission,
        )
    }

    /// Dehazed-image SSIM for the three image presets.
    pub fn image_table(&self) -> String {
        self.table(
            "Dehazed image",
            self.input_image,
            &[Preset::IL2NoT, Preset::IL2T, Preset::IL2PerT],
            &REFERENCE_IMAGE,
            |r| r.means().ssim_dehazed,
        )
    }

    /// Both tables, plus a line naming the failed preset if the grid stopped.
    pub fn summary(&self) -> String {
        let mut s = format!("{}\n{}", self.transmission_table(), self.image_table());
        if let Some((p, e)) = &self.failure {
            let _ = writeln!(s, "aborted at {p}: {e}");
        }
        s
    }
}
