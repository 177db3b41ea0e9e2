//! Stage-wise optimization of the transmission generator (with optional
//! adversarial training) followed by joint fine-tuning with the dehazer.

pub mod ablation;
mod adam;

pub use ablation::{run_ablation_grid, AblationEntry, AblationResult};
pub use adam::{Adam, AdamConfig};

use crate::autodiff::{Graph, NormMode, Var};
use crate::dataset::SceneSample;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, dehazing_loss, transmission_loss, FeatureNet, LossTerms, LossWeights,
};
use crate::networks::{build_dehazer, build_discriminator, build_generator, Forward, Network};
use crate::scalar::Scalar;
use crate::tensor::htf;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub image_size: usize,
    /// Down/up-sampling stages of the generator; inputs must be multiples of `2^depth`.
    pub depth: usize,
    pub scale: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub seed: u64,
    pub feature_seed: u64,
    /// Discriminator updates per generator update.
    pub d_steps_per_g: usize,
    /// Feed the hazy image to the discriminator alongside the transmission map.
    pub disc_condition: bool,
    /// Weight of the transmission objective in the stage-2 total.
    pub stage2_t_weight: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            image_size: 64,
            depth: 6,
            scale: 0.125,
            stage1_iters: 200,
            stage2_iters: 200,
            seed: 0,
            feature_seed: 7,
            d_steps_per_g: 1,
            disc_condition: false,
            stage2_t_weight: 1.0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.image_size == 0 {
            return bad("batch_size and image_size must be positive".into());
        }
        if self.image_size % (1 << self.depth.min(16)) != 0 {
            return bad(format!(
                "image_size {} is not a multiple of 2^{}",
                self.image_size, self.depth
            ));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad(format!("scale must be in (0, 1], got {}", self.scale));
        }
        if self.d_steps_per_g == 0 {
            return bad("d_steps_per_g must be at least 1".into());
        }
        if !(self.stage2_t_weight >= 0.0 && self.stage2_t_weight.is_finite()) {
            return bad(format!(
                "stage2_t_weight must be >= 0, got {}",
                self.stage2_t_weight
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        self.loss.validate()
    }
}

/// One training example with all maps in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    /// `[3, H, W]`
    pub hazy: Tensor<T>,
    /// `[3, H, W]`
    pub clear: Tensor<T>,
    /// `[1, H, W]`
    pub transmission: Tensor<T>,
}

impl<T: Scalar> From<&SceneSample<T>> for Sample<T> {
    fn from(s: &SceneSample<T>) -> Self {
        Self {
            id: s.id.clone(),
            hazy: s.hazy.clone(),
            clear: s.clear.clone(),
            transmission: s.transmission.tensor().clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub euclidean: f64,
    pub adversarial: f64,
    pub gradient: f64,
    pub perceptual: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,loss_total,loss_e,loss_a,loss_g,loss_p";

/// Loss curve as CSV; disabled terms are written as 0.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iter, r.total, r.euclidean, r.adversarial, r.gradient, r.perceptual
        );
    }
    s
}

/// Mean of the first and last `window` Euclidean terms of a curve.
pub fn smoothed_endpoints(records: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    let w = window.max(1);
    if records.len() < w {
        return None;
    }
    let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.euclidean).sum::<f64>() / rs.len() as f64;
    Some((mean(&records[..w]), mean(&records[records.len() - w..])))
}

/// Batch of samples at iteration `iter` of `stage`; depends only on the seed,
/// not on anything that happened earlier in the run.
pub fn batch_indices(n: usize, batch: usize, seed: u64, stage: u8, iter: usize) -> Vec<usize> {
    let key = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((stage as u64) << 48)
        .wrapping_add(iter as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    if batch <= n {
        sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

struct Batch<T> {
    /// Hazy input rescaled to `[-1, 1]`.
    input: Tensor<T>,
    clear: Tensor<T>,
    transmission: Tensor<T>,
}

fn to_signed<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let two = T::c(2.0);
    t.map(|v| two * v - T::one())
}

fn half_affine<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    let h = T::c(0.5);
    g.affine(v, h, h)
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Option<Var>) -> f64 {
    v.map(|v| g.value(v).data()[0].f64()).unwrap_or(0.0)
}

fn check_loss<T: Scalar>(g: &Graph<T>, v: Var, what: &str, iter: usize) -> Result<()> {
    let x = g.value(v).data()[0].f64();
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} loss is {x} at iteration {iter}"
        )))
    }
}

fn step_network<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    grads: &[Tensor<T>],
) -> Result<()> {
    let mut params: Vec<&mut Tensor<T>> = net.params.iter_mut().map(|p| &mut p.value).collect();
    opt.step(&mut params, grads)
}

fn sum_grads<T: Scalar>(mut a: Vec<Tensor<T>>, b: Vec<Tensor<T>>) -> Vec<Tensor<T>> {
    for (x, y) in a.iter_mut().zip(&b) {
        x.add_assign(y);
    }
    a
}

fn disc_input<T: Scalar>(
    g: &mut Graph<T>,
    condition: bool,
    t_signed: Var,
    input: Var,
) -> Result<Var> {
    if condition {
        g.concat_channels(t_signed, input)
    } else {
        Ok(t_signed)
    }
}

/// Generator forward plus the transmission objective on `g`. The
/// discriminator enters as a constant copy, so it is neither updated nor has
/// its running statistics moved.
fn transmission_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &TrainConfig,
    gen: &mut Network<T>,
    disc: &Network<T>,
    x: Var,
    b: &Batch<T>,
) -> Result<(Forward, Var, LossTerms)> {
    let fg = gen.forward(g, x, None, NormMode::Train, true)?;
    let t = half_affine(g, fg.output);
    let target = g.constant(b.transmission.clone());
    let d_fake = if cfg.loss.enable_adv {
        let mut disc = disc.clone();
        let din = disc_input(g, cfg.disc_condition, fg.output, x)?;
        Some(disc.forward(g, din, None, NormMode::Train, false)?.output)
    } else {
        None
    };
    let terms = transmission_loss(g, t, target, d_fake, &cfg.loss)?;
    Ok((fg, t, terms))
}

/// The three networks, the frozen feature extractor and their optimizers.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub generator: Network<T>,
    pub discriminator: Network<T>,
    pub dehazer: Network<T>,
    pub feature: FeatureNet<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub opt_h: Adam<T>,
    pub stage1_done: usize,
    pub stage2_done: usize,
}

fn optimizer<T: Scalar>(cfg: AdamConfig, net: &Network<T>) -> Adam<T> {
    Adam::new(cfg, net.params.iter().map(|p| p.value.shape()))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut generator = build_generator(cfg.scale, cfg.depth)?;
        let disc_in = if cfg.disc_condition { 4 } else { 1 };
        let mut discriminator = build_discriminator(cfg.scale, disc_in)?;
        let mut dehazer = build_dehazer(cfg.scale)?;
        generator.init_params(cfg.seed);
        discriminator.init_params(cfg.seed.wrapping_add(1));
        dehazer.init_params(cfg.seed.wrapping_add(2));
        Ok(Self {
            opt_g: optimizer(cfg.adam, &generator),
            opt_d: optimizer(cfg.adam, &discriminator),
            opt_h: optimizer(cfg.adam, &dehazer),
            feature: FeatureNet::new(cfg.feature_seed),
            generator,
            discriminator,
            dehazer,
            stage1_done: 0,
            stage2_done: 0,
            cfg,
        })
    }

    fn uses_branch(&self) -> bool {
        self.cfg.loss.enable_transmission_branch
    }

    fn uses_adv(&self) -> bool {
        self.cfg.loss.enable_adv && self.uses_branch()
    }

    /// Names of the networks updated in `stage` (1 or 2).
    pub fn trainable_groups(&self, stage: u8) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.uses_branch() {
            if self.uses_adv() {
                out.push("discriminator");
            }
            out.push("generator");
        }
        if stage == 2 {
            out.push("dehazer");
        }
        out
    }

    fn check_data(&self, data: &[Sample<T>]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let s = self.cfg.image_size;
        for d in data {
            if d.hazy.shape() != [3, s, s]
                || d.clear.shape() != [3, s, s]
                || d.transmission.shape() != [1, s, s]
            {
                return Err(Error::dim(format!(
                    "sample {} does not match the configured {s}x{s} size",
                    d.id
                )));
            }
        }
        Ok(())
    }

    fn batch(&self, data: &[Sample<T>], stage: u8, iter: usize) -> Result<Batch<T>> {
        let idx = batch_indices(data.len(), self.cfg.batch_size, self.cfg.seed, stage, iter);
        let pick = |f: fn(&Sample<T>) -> &Tensor<T>| {
            let items: Vec<&Tensor<T>> = idx.iter().map(|&i| f(&data[i])).collect();
            Tensor::stack(&items)
        };
        Ok(Batch {
            input: to_signed(&pick(|s| &s.hazy)?),
            clear: pick(|s| &s.clear)?,
            transmission: pick(|s| &s.transmission)?,
        })
    }

    fn d_step(&mut self, b: &Batch<T>, iter: usize) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(b.input.clone());
        // A copy keeps the generator's running statistics out of the D update.
        let mut gen = self.generator.clone();
        let fake = gen.forward(&mut g, x, None, NormMode::Train, false)?.output;
        let fake = g.detach(fake);
        let real = g.constant(to_signed(&b.transmission));
        let cond = self.cfg.disc_condition;
        let (din_r, din_f) = (
            disc_input(&mut g, cond, real, x)?,
            disc_input(&mut g, cond, fake, x)?,
        );
        let fr = self
            .discriminator
            .forward(&mut g, din_r, None, NormMode::Train, true)?;
        let ff = self
            .discriminator
            .forward(&mut g, din_f, None, NormMode::Train, true)?;
        let loss = adversarial_d_loss(&mut g, fr.output, ff.output)?;
        check_loss(&g, loss, "discriminator", iter)?;
        g.backward(loss)?;
        let grads = sum_grads(
            self.discriminator.gradients(&g, &fr),
            self.discriminator.gradients(&g, &ff),
        );
        step_network(&mut self.discriminator, &mut self.opt_d, &grads)?;
        Ok(g.value(loss).data()[0].f64())
    }

    /// Runs `f`, restoring every network, optimizer and counter if it fails.
    fn transactional<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let backup = self.clone();
        let out = f(self);
        if out.is_err() {
            *self = backup;
        }
        out
    }

    /// One stage-1 iteration: `d_steps_per_g` discriminator updates (when the
    /// adversarial term is on) followed by one generator update. On error the
    /// trainer is left as it was.
    pub fn step_stage1(&mut self, data: &[Sample<T>]) -> Result<LossRecord> {
        self.transactional(|tr| tr.step_stage1_inner(data))
    }

    /// One joint stage-2 iteration. The dehazing loss reaches the generator
    /// through the estimated transmission used as guidance. On error the
    /// trainer is left as it was.
    pub fn step_stage2(&mut self, data: &[Sample<T>]) -> Result<LossRecord> {
        self.transactional(|tr| tr.step_stage2_inner(data))
    }

    fn step_stage1_inner(&mut self, data: &[Sample<T>]) -> Result<LossRecord> {
        if !self.uses_branch() {
            return Err(Error::InvalidArgument(
                "stage 1 trains the transmission branch, which this configuration disables".into(),
            ));
        }
        self.check_data(data)?;
        let iter = self.stage1_done + 1;
        let b = self.batch(data, 1, iter)?;
        if self.uses_adv() {
            for _ in 0..self.cfg.d_steps_per_g {
                self.d_step(&b, iter)?;
            }
        }
        let mut g = Graph::new();
        let x = g.constant(b.input.clone());
        let (fg, _, terms) = transmission_graph(
            &mut g,
            &self.cfg,
            &mut self.generator,
            &self.discriminator,
            x,
            &b,
        )?;
        check_loss(&g, terms.total, "transmission", iter)?;
        g.backward(terms.total)?;
        let grads = self.generator.gradients(&g, &fg);
        step_network(&mut self.generator, &mut self.opt_g, &grads)?;
        self.stage1_done = iter;
        Ok(LossRecord {
            iter,
            total: scalar_of(&g, Some(terms.total)),
            euclidean: scalar_of(&g, Some(terms.euclidean)),
            adversarial: scalar_of(&g, terms.adversarial),
            gradient: scalar_of(&g, terms.gradient),
            perceptual: 0.0,
        })
    }

    fn step_stage2_inner(&mut self, data: &[Sample<T>]) -> Result<LossRecord> {
        self.check_data(data)?;
        let iter = self.stage2_done + 1;
        let b = self.batch(data, 2, iter)?;
        if self.uses_adv() {
            for _ in 0..self.cfg.d_steps_per_g {
                self.d_step(&b, iter)?;
            }
        }
        let mut g = Graph::new();
        let x = g.constant(b.input.clone());
        let (fg, guide, t_terms) = if self.uses_branch() {
            let (fg, t, terms) = transmission_graph(
                &mut g,
                &self.cfg,
                &mut self.generator,
                &self.discriminator,
                x,
                &b,
            )?;
            (Some(fg), t, Some(terms))
        } else {
            let (nb, _, h, w) = b.input.dims4()?;
            (None, g.constant(Tensor::ones(&[nb, 1, h, w])), None)
        };
        let fh = self
            .dehazer
            .forward(&mut g, x, Some(guide), NormMode::Train, true)?;
        let j = half_affine(&mut g, fh.output);
        let clear = g.constant(b.clear.clone());
        let d_terms = dehazing_loss(&mut g, j, clear, Some(&self.feature), &self.cfg.loss)?;
        let total = match t_terms {
            Some(t) => {
                let wt = g.affine(t.total, T::c(self.cfg.stage2_t_weight), T::zero());
                g.add(d_terms.total, wt)?
            }
            None => d_terms.total,
        };
        check_loss(&g, total, "joint", iter)?;
        g.backward(total)?;
        let h_grads = self.dehazer.gradients(&g, &fh);
        let g_grads = fg.as_ref().map(|f| self.generator.gradients(&g, f));
        step_network(&mut self.dehazer, &mut self.opt_h, &h_grads)?;
        if let Some(gr) = g_grads {
            step_network(&mut self.generator, &mut self.opt_g, &gr)?;
        }
        self.stage2_done = iter;
        Ok(LossRecord {
            iter,
            total: scalar_of(&g, Some(total)),
            euclidean: scalar_of(&g, Some(d_terms.euclidean)),
            adversarial: scalar_of(&g, t_terms.and_then(|t| t.adversarial)),
            gradient: scalar_of(&g, t_terms.and_then(|t| t.gradient)),
            perceptual: scalar_of(&g, d_terms.perceptual),
        })
    }

    /// Runs the remaining stage-1 iterations; a no-op without the
    /// transmission branch.
    pub fn run_stage1(&mut self, data: &[Sample<T>]) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        if !self.uses_branch() {
            return Ok(out);
        }
        while self.stage1_done < self.cfg.stage1_iters {
            out.push(self.step_stage1(data)?);
        }
        Ok(out)
    }

    pub fn run_stage2(&mut self, data: &[Sample<T>]) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.stage2_done < self.cfg.stage2_iters {
            out.push(self.step_stage2(data)?);
        }
        Ok(out)
    }

    /// Evaluation-mode transmission map `[B,1,H,W]` and dehazed image
    /// `[B,3,H,W]`, both in `[0, 1]`, for hazy images in `[0, 1]`.
    pub fn predict(&mut self, hazy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (nb, c, h, w) = hazy.dims4()?;
        if c != 3 {
            return Err(Error::dim(format!(
                "expected an RGB batch, got {c} channels"
            )));
        }
        let input = to_signed(hazy);
        let h_ = T::c(0.5);
        let unit = |t: Tensor<T>| t.map(|v| h_ * v + h_);
        let t = if self.uses_branch() {
            unit(self.generator.infer(&input, None)?)
        } else {
            Tensor::ones(&[nb, 1, h, w])
        };
        let j = unit(self.dehazer.infer(&input, Some(&t))?);
        Ok((t, j))
    }

    fn named_state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, net) in [
            ("gen", &self.generator),
            ("disc", &self.discriminator),
            ("deh", &self.dehazer),
        ] {
            out.extend(
                net.named_tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}/{n}"), t.clone())),
            );
        }
        out.extend(self.opt_g.named_state("adam_gen"));
        out.extend(self.opt_d.named_state("adam_disc"));
        out.extend(self.opt_h.named_state("adam_deh"));
        out.push((
            "progress.stage1".into(),
            Tensor::scalar(T::c(self.stage1_done as f64)),
        ));
        out.push((
            "progress.stage2".into(),
            Tensor::scalar(T::c(self.stage2_done as f64)),
        ));
        out
    }

    /// Writes `path` (tensor archive), `path.index` and `path.meta` (the
    /// training configuration as TOML).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let state = self.named_state();
        let refs: Vec<(String, &Tensor<T>)> = state.iter().map(|(n, t)| (n.clone(), t)).collect();
        htf::save_archive(path, &refs)?;
        let meta = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        htf::write_atomic(&meta_path(path), meta.as_bytes())
    }

    /// Restores a checkpoint, taking the configuration from its sidecar.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mp = meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mp.display())))?;
        let mut tr = Self::new(cfg)?;
        let mut entries: HashMap<String, Tensor<T>> =
            htf::load_archive(path)?.into_iter().collect();
        let mut take = |name: &str| entries.remove(name);
        tr.generator.load_named(|n| take(&format!("gen/{n}")))?;
        tr.discriminator
            .load_named(|n| take(&format!("disc/{n}")))?;
        tr.dehazer.load_named(|n| take(&format!("deh/{n}")))?;
        tr.opt_g.load_named("adam_gen", &mut take)?;
        tr.opt_d.load_named("adam_disc", &mut take)?;
        tr.opt_h.load_named("adam_deh", &mut take)?;
        let mut count = |name: &str| -> Result<usize> {
            let v = take(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?
                .data()
                .first()
                .map(|v| v.f64())
                .unwrap_or(-1.0);
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{name} is not a count")))
            }
        };
        tr.stage1_done = count("progress.stage1")?;
        tr.stage2_done = count("progress.stage2")?;
        Ok(tr)
    }
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests;
