use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers mirror the parameter
/// list they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(cfg: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self { cfg, m, v, step: 0 }
    }

    /// Applies one update. Every gradient is checked before any parameter is
    /// touched, so a non-finite gradient leaves parameters and state intact.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape(g)?;
            self.m[i].expect_same_shape(g)?;
            if !g.all_finite() {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::NonFinite(format!(
                    "gradient of tensor {i} (shape {:?}) has {bad} non-finite entries at step {}",
                    g.shape(),
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = T::c(1.0 - c.beta1.powi(t));
        let bc2 = T::c(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Named moment buffers and the step counter, for checkpoints.
    pub fn named_state(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::scalar(T::c(self.step as f64)),
        )];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}.m{i:03}"), m.clone()));
            out.push((format!("{prefix}.v{i:03}"), v.clone()));
        }
        out
    }

    pub fn load_named(
        &mut self,
        prefix: &str,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        let mut fetch = |name: String, expect: &[usize]| -> Result<Tensor<T>> {
            let t =
                lookup(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape() != expect {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {expect:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let step = fetch(format!("{prefix}.step"), &[])?.data()[0].f64();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Format(format!(
                "{prefix}.step is not a count: {step}"
            )));
        }
        self.step = step as u64;
        for i in 0..self.m.len() {
            let shape = self.m[i].shape().to_vec();
            self.m[i] = fetch(format!("{prefix}.m{i:03}"), &shape)?;
            self.v[i] = fetch(format!("{prefix}.v{i:03}"), &shape)?;
        }
        Ok(())
    }
}
