use super::dcp::{dcp_dehaze, DcpOptions};
use super::ssim;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{Sample, Trainer};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    /// Hazy input against the clear image.
    pub ssim_input: f64,
    pub ssim_dehazed: f64,
    pub ssim_transmission: f64,
    pub ssim_dcp_dehazed: f64,
    pub ssim_dcp_transmission: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by id.
    pub rows: Vec<EvalRow>,
    pub fingerprint: String,
    /// Wall-clock inference seconds per row, in row order. Not part of the
    /// CSV or table so those stay reproducible.
    pub seconds: Vec<f64>,
}

pub const EVAL_CSV_HEADER: &str =
    "id,ssim_input,ssim_dehazed,ssim_transmission,ssim_dcp_dehazed,ssim_dcp_transmission";

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Column means, labelled `mean`.
    pub fn means(&self) -> EvalRow {
        let m = |f: fn(&EvalRow) -> f64| mean(self.rows.iter().map(f));
        EvalRow {
            id: "mean".into(),
            ssim_input: m(|r| r.ssim_input),
            ssim_dehazed: m(|r| r.ssim_dehazed),
            ssim_transmission: m(|r| r.ssim_transmission),
            ssim_dcp_dehazed: m(|r| r.ssim_dcp_dehazed),
            ssim_dcp_transmission: m(|r| r.ssim_dcp_transmission),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.id,
                r.ssim_input,
                r.ssim_dehazed,
                r.ssim_transmission,
                r.ssim_dcp_dehazed,
                r.ssim_dcp_transmission
            );
        }
        s
    }

    /// Method-by-metric summary table.
    pub fn to_table(&self) -> String {
        let m = self.means();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "SSIM on {} images (config {})",
            self.rows.len(),
            self.fingerprint
        );
        let _ = writeln!(s, "{:<20}{:>14}{:>10}", "Method", "Transmission", "Image");
        let _ = writeln!(s, "{:<20}{:>14}{:>10.4}", "Input", "-", m.ssim_input);
        let _ = writeln!(
            s,
            "{:<20}{:>14.4}{:>10.4}",
            "Dark channel prior", m.ssim_dcp_transmission, m.ssim_dcp_dehazed
        );
        let _ = writeln!(
            s,
            "{:<20}{:>14.4}{:>10.4}",
            "Network", m.ssim_transmission, m.ssim_dehazed
        );
        let _ = writeln!(s, "{:<20}{:>14.4}{:>10.4}", "Target", 1.0, 1.0);
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("id,seconds\n");
        for (r, t) in self.rows.iter().zip(&self.seconds) {
            let _ = writeln!(s, "{},{t:.6}", r.id);
        }
        s
    }
}

/// Scores one sample given a predicted transmission `[1,H,W]` and image `[3,H,W]`.
pub fn score_sample<T: Scalar>(s: &Sample<T>, t: &Tensor<T>, j: &Tensor<T>) -> Result<EvalRow> {
    let (_, h, w) = s.transmission.dims3()?;
    let flat = |x: &Tensor<T>| x.clone().reshape(&[h, w]);
    let dcp = dcp_dehaze(&s.hazy, &DcpOptions::default())?;
    Ok(EvalRow {
        id: s.id.clone(),
        ssim_input: ssim(&s.hazy, &s.clear)?,
        ssim_dehazed: ssim(j, &s.clear)?,
        ssim_transmission: ssim(&flat(t)?, &flat(&s.transmission)?)?,
        ssim_dcp_dehazed: ssim(&dcp.dehazed, &s.clear)?,
        ssim_dcp_transmission: ssim(&flat(dcp.transmission.tensor())?, &flat(&s.transmission)?)?,
    })
}

/// Runs evaluation-mode inference on every sample and scores it against the
/// ground truth. Also returns the predictions `(t, J)` in row order.
pub fn evaluate<T: Scalar>(
    trainer: &mut Trainer<T>,
    samples: &[Sample<T>],
    fingerprint: &str,
) -> Result<(EvalReport, Vec<(Tensor<T>, Tensor<T>)>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
    let mut rows = Vec::with_capacity(samples.len());
    let mut seconds = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    for i in order {
        let s = &samples[i];
        let (c, h, w) = s.hazy.dims3()?;
        let start = Instant::now();
        let (t, j) = trainer.predict(&s.hazy.clone().reshape(&[1, c, h, w])?)?;
        seconds.push(start.elapsed().as_secs_f64());
        let t = t.reshape(&[1, h, w])?;
        let j = j.reshape(&[c, h, w])?;
        rows.push(score_sample(s, &t, &j)?);
        preds.push((t, j));
    }
    Ok((
        EvalReport {
            rows,
            fingerprint: fingerprint.to_string(),
            seconds,
        },
        preds,
    ))
}
