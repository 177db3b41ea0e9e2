//! Declarative construction of the transmission generator, the patch
//! discriminator and the guided dehazing network.
//!
//! A network is a flat list of [`LayerSpec`]s run by a small interpreter.
//! `Save`/`Skip` pairs implement additive shortcuts between symmetric stages,
//! and `ConcatGuide` appends the guidance input (the transmission map) along
//! the channel axis.

mod builders;

pub use builders::{
    build_dehazer, build_discriminator, build_generator, DEHAZER_FEATURES, DEHAZER_FUSION,
    DISCRIMINATOR_CHANNELS, FULL_DEPTH, GENERATOR_DECODER, GENERATOR_ENCODER,
};

use crate::autodiff::{Graph, NormMode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{conv_out_extent, tconv_out_extent, ConvGeometry};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Tconv,
    Batchnorm,
    Prelu,
    Relu,
    Tanh,
    Sigmoid,
    /// Stores the current activation in a numbered slot.
    Save,
    /// Adds a saved activation (shared channel prefix) onto the current one.
    Skip,
    /// Concatenates the guidance input onto the current activation.
    ConcatGuide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output channels for `Conv`/`Tconv`; the slot index for `Save`/`Skip`.
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn conv(out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            out_channels: out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn tconv(out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Tconv,
            ..Self::conv(out, kernel, stride, padding)
        }
    }

    pub fn plain(kind: LayerKind) -> Self {
        Self {
            kind,
            out_channels: 0,
            kernel: 0,
            stride: 0,
            padding: 0,
        }
    }

    pub fn slot(kind: LayerKind, slot: usize) -> Self {
        Self {
            out_channels: slot,
            ..Self::plain(kind)
        }
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    Dehazer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub in_channels: usize,
    /// Channels of the guidance input consumed by `ConcatGuide`.
    pub guide_channels: usize,
    /// Input height and width must be multiples of this.
    pub input_multiple: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    Slope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

/// A network specification together with its learnable parameters and
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub scale: f64,
    pub params: Vec<Param<T>>,
    pub stats: Vec<RunningStats<T>>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// One leaf per entry of [`Network::params`], in the same order.
    pub params: Vec<Var>,
}

/// `ceil(scale · c)`, at least 1.
pub fn scaled_channels(c: usize, scale: f64) -> usize {
    ((scale * c as f64 - 1e-9).ceil() as usize).max(1)
}

pub fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "scale must lie in (0, 1], got {scale}"
        )))
    }
}

impl<T: Scalar> Network<T> {
    /// Allocates parameter tensors with the shapes implied by `spec`; values are
    /// set by [`Network::init_params`].
    pub fn from_spec(spec: NetworkSpec, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut ch = spec.in_channels;
        let mut slots: Vec<Option<usize>> = Vec::new();
        for (i, l) in spec.layers.iter().enumerate() {
            let mut push = |suffix: &str, role, shape: &[usize]| {
                params.push(Param {
                    name: format!("l{i:02}.{suffix}"),
                    role,
                    value: Tensor::zeros(shape),
                })
            };
            match l.kind {
                LayerKind::Conv => {
                    push(
                        "conv.weight",
                        ParamRole::Weight,
                        &[l.out_channels, ch, l.kernel, l.kernel],
                    );
                    push("conv.bias", ParamRole::Bias, &[l.out_channels]);
                    ch = l.out_channels;
                }
                LayerKind::Tconv => {
                    push(
                        "tconv.weight",
                        ParamRole::Weight,
                        &[ch, l.out_channels, l.kernel, l.kernel],
                    );
                    push("tconv.bias", ParamRole::Bias, &[l.out_channels]);
                    ch = l.out_channels;
                }
                LayerKind::Batchnorm => {
                    push("bn.gamma", ParamRole::Gamma, &[ch]);
                    push("bn.beta", ParamRole::Beta, &[ch]);
                    stats.push(RunningStats::new(ch));
                }
                LayerKind::Prelu => push("prelu.slope", ParamRole::Slope, &[ch]),
                LayerKind::Save => {
                    if slots.len() <= l.out_channels {
                        slots.resize(l.out_channels + 1, None);
                    }
                    slots[l.out_channels] = Some(ch);
                }
                LayerKind::Skip => {
                    if slots.get(l.out_channels).copied().flatten().is_none() {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i} skips from unsaved slot {}",
                            l.out_channels
                        )));
                    }
                }
                LayerKind::ConcatGuide => ch += spec.guide_channels,
                LayerKind::Relu | LayerKind::Tanh | LayerKind::Sigmoid => {}
            }
        }
        Ok(Self {
            spec,
            scale,
            params,
            stats,
        })
    }

    pub fn kind(&self) -> NetworkKind {
        self.spec.kind
    }

    /// Output channels of every `Conv`/`Tconv` layer, in order.
    pub fn conv_channels(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Tconv))
            .map(|l| l.out_channels)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Conv/tconv weights ~ N(0, 0.02²), biases 0, batch-norm gamma ~ N(1, 0.02²)
    /// and beta 0, PReLU slopes 0.25. Running statistics are reset.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            p.value = match p.role {
                ParamRole::Weight => Tensor::randn(&shape, 0.0, 0.02, &mut rng),
                ParamRole::Gamma => Tensor::randn(&shape, 1.0, 0.02, &mut rng),
                ParamRole::Bias | ParamRole::Beta => Tensor::zeros(&shape),
                ParamRole::Slope => Tensor::full(&shape, T::c(0.25)),
            };
        }
        for s in &mut self.stats {
            *s = RunningStats::new(s.mean.len());
        }
    }

    /// Output shape `[B, C, H, W]` for an input of the given extents, computed
    /// from the spec alone.
    pub fn output_shape(&self, batch: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        self.check_input_extent(h, w)?;
        let (mut ch, mut h, mut w) = (self.spec.in_channels, h, w);
        let mut slots: Vec<(usize, usize, usize)> = Vec::new();
        for l in &self.spec.layers {
            match l.kind {
                LayerKind::Conv => {
                    h = conv_out_extent(h, l.kernel, l.geometry())?;
                    w = conv_out_extent(w, l.kernel, l.geometry())?;
                    ch = l.out_channels;
                }
                LayerKind::Tconv => {
                    h = tconv_out_extent(h, l.kernel, l.geometry())?;
                    w = tconv_out_extent(w, l.kernel, l.geometry())?;
                    ch = l.out_channels;
                }
                LayerKind::Save => {
                    if slots.len() <= l.out_channels {
                        slots.resize(l.out_channels + 1, (0, 0, 0));
                    }
                    slots[l.out_channels] = (ch, h, w);
                }
                LayerKind::Skip => {
                    let (_, sh, sw) = slots[l.out_channels];
                    if (sh, sw) != (h, w) {
                        return Err(Error::dim(format!(
                            "skip from slot {} joins {sh}x{sw} onto {h}x{w}",
                            l.out_channels
                        )));
                    }
                }
                LayerKind::ConcatGuide => ch += self.spec.guide_channels,
                _ => {}
            }
        }
        Ok([batch, ch, h, w])
    }

    fn check_input_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spec.input_multiple.max(1);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::dim(format!(
                "{:?} input {h}x{w} must be a nonzero multiple of {m}",
                self.spec.kind
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. Parameters become learnable leaves when
    /// `trainable`, constants otherwise. In [`NormMode::Train`] the running
    /// statistics are updated.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
        guide: Option<Var>,
        mode: NormMode,
        trainable: bool,
    ) -> Result<Forward> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        self.forward_with(g, input, guide, mode, vars)
    }

    /// Like [`Network::forward`] but with caller-supplied parameter handles,
    /// one per entry of [`Network::params`].
    pub fn forward_with(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
        guide: Option<Var>,
        mode: NormMode,
        vars: Vec<Var>,
    ) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{:?} has {} parameters, got {} handles",
                self.spec.kind,
                self.params.len(),
                vars.len()
            )));
        }
        let (_, cin, h, w) = g.value(input).dims4()?;
        if cin != self.spec.in_channels {
            return Err(Error::dim(format!(
                "{:?} expects {} input channels, got {cin}",
                self.spec.kind, self.spec.in_channels
            )));
        }
        self.check_input_extent(h, w)?;
        if let Some(gd) = guide {
            let (_, gc, gh, gw) = g.value(gd).dims4()?;
            if (gh, gw) != (h, w) || gc != self.spec.guide_channels {
                return Err(Error::dim(format!(
                    "guidance input {:?} does not match {h}x{w} with {} channels",
                    g.value(gd).shape(),
                    self.spec.guide_channels
                )));
            }
        }
        let mut next_param = vars.iter().copied();
        let mut take = || next_param.next().expect("parameter list matches spec");
        let mut stats = self.stats.iter_mut();
        let mut slots: Vec<Option<Var>> = Vec::new();
        let mut x = input;
        for l in &self.spec.layers {
            x = match l.kind {
                LayerKind::Conv => {
                    let (wt, b) = (take(), take());
                    g.conv2d(x, wt, Some(b), l.geometry())?
                }
                LayerKind::Tconv => {
                    let (wt, b) = (take(), take());
                    g.conv_transpose2d(x, wt, Some(b), l.geometry())?
                }
                LayerKind::Batchnorm => {
                    let (gamma, beta) = (take(), take());
                    let rs = stats.next().expect("running stats match spec");
                    g.batch_norm(x, gamma, beta, rs, mode)?
                }
                LayerKind::Prelu => {
                    let slope = take();
                    g.prelu(x, slope)?
                }
                LayerKind::Relu => g.relu(x),
                LayerKind::Tanh => g.tanh(x),
                LayerKind::Sigmoid => g.sigmoid(x),
                LayerKind::Save => {
                    if slots.len() <= l.out_channels {
                        slots.resize(l.out_channels + 1, None);
                    }
                    slots[l.out_channels] = Some(x);
                    x
                }
                LayerKind::Skip => {
                    let s = slots[l.out_channels].expect("validated at construction");
                    g.add_prefix(s, x)?
                }
                LayerKind::ConcatGuide => {
                    let gd = guide.ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{:?} needs a guidance input",
                            self.spec.kind
                        ))
                    })?;
                    g.concat_channels(x, gd)?
                }
            };
        }
        Ok(Forward {
            output: x,
            params: vars,
        })
    }

    /// Evaluation-mode forward pass returning only the output tensor.
    pub fn infer(&mut self, input: &Tensor<T>, guide: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let gd = guide.map(|t| g.constant(t.clone()));
        let fwd = self.forward(&mut g, x, gd, NormMode::Eval, false)?;
        Ok(g.value(fwd.output).clone())
    }

    /// Gradients of the parameters of a forward pass after `g.backward`; a
    /// parameter that received no gradient gets zeros.
    pub fn gradients(&self, g: &Graph<T>, fwd: &Forward) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&fwd.params)
            .map(|(p, &v)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }

    /// Named tensors for checkpointing: parameters then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect();
        for (i, s) in self.stats.iter().enumerate() {
            out.push((format!("bn{i:02}.running_mean"), &s.mean));
            out.push((format!("bn{i:02}.running_var"), &s.var));
        }
        out
    }

    /// Replaces every named tensor, checking shapes.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        let mut fetch = |name: &str, expect: &[usize]| -> Result<Tensor<T>> {
            let t =
                lookup(name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape() != expect {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {expect:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for p in &mut self.params {
            p.value = fetch(&p.name, &p.value.shape().to_vec())?;
        }
        for (i, s) in self.stats.iter_mut().enumerate() {
            s.mean = fetch(&format!("bn{i:02}.running_mean"), &s.mean.shape().to_vec())?;
            s.var = fetch(&format!("bn{i:02}.running_var"), &s.var.shape().to_vec())?;
        }
        Ok(())
    }
}

/// Receptive field of a sequential conv stack: `r ← r + (k − 1)·jump`,
/// `jump ← jump·stride`.
pub fn receptive_field(spec: &NetworkSpec) -> Result<usize> {
    let mut layers = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Conv => layers.push((l.kernel, l.stride)),
            LayerKind::Batchnorm
            | LayerKind::Prelu
            | LayerKind::Relu
            | LayerKind::Tanh
            | LayerKind::Sigmoid => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({other:?}) makes the spec non-sequential"
                )))
            }
        }
    }
    Ok(receptive_field_of(&layers))
}

/// Receptive field of `(kernel, stride)` layers applied in order.
pub fn receptive_field_of(layers: &[(usize, usize)]) -> usize {
    let (mut r, mut jump) = (1, 1);
    for &(k, s) in layers {
        r += (k - 1) * jump;
        jump *= s;
    }
    r
}
