use super::{
    check_scale, scaled_channels, LayerKind, LayerSpec, Network, NetworkKind, NetworkSpec,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Encoder widths at scale 1 (`CP(15)-CBP(30)-…-CBP(120)`).
pub const GENERATOR_ENCODER: [usize; 8] = [15, 30, 60, 120, 120, 120, 120, 120];
/// Decoder widths at scale 1 before the single-channel `TC(1)` head.
pub const GENERATOR_DECODER: [usize; 7] = [120, 120, 120, 120, 60, 30, 15];
/// `CB(48)-CBP(96)-CBP(192)-CBP(384)-CBP(384)`, followed by `C(1)-Sigmoid`.
pub const DISCRIMINATOR_CHANNELS: [usize; 5] = [48, 96, 192, 384, 384];
/// Hazy-feature extractor widths, followed by a single-channel map.
pub const DEHAZER_FEATURES: [usize; 3] = [20, 40, 80];
/// Guided fusion widths, followed by the RGB `C(3)-TanH` head.
pub const DEHAZER_FUSION: [usize; 3] = [80, 40, 20];
/// Number of down/up-sampling stages of the full-size generator.
pub const FULL_DEPTH: usize = 8;

/// Encoder-decoder transmission generator with `depth` stride-2 stages each
/// way and additive shortcuts between symmetric stages. Input height and width
/// must be multiples of `2^depth`.
pub fn build_generator<T: Scalar>(scale: f64, depth: usize) -> Result<Network<T>> {
    check_scale(scale)?;
    if !(1..=FULL_DEPTH).contains(&depth) {
        return Err(Error::InvalidArgument(format!(
            "generator depth must be in 1..=8, got {depth}"
        )));
    }
    let enc: Vec<usize> = GENERATOR_ENCODER[..depth]
        .iter()
        .map(|&c| scaled_channels(c, scale))
        .collect();
    let dec: Vec<usize> = GENERATOR_DECODER[FULL_DEPTH - depth..]
        .iter()
        .map(|&c| scaled_channels(c, scale))
        .collect();

    let mut layers = Vec::new();
    for (i, &c) in enc.iter().enumerate() {
        layers.push(LayerSpec::conv(c, 4, 2, 1));
        if i > 0 {
            layers.push(LayerSpec::plain(LayerKind::Batchnorm));
        }
        layers.push(LayerSpec::plain(LayerKind::Prelu));
        if i + 1 < depth {
            layers.push(LayerSpec::slot(LayerKind::Save, i));
        }
    }
    for (j, &c) in dec.iter().enumerate() {
        layers.push(LayerSpec::tconv(c, 4, 2, 1));
        layers.push(LayerSpec::plain(LayerKind::Batchnorm));
        layers.push(LayerSpec::plain(LayerKind::Relu));
        layers.push(LayerSpec::slot(LayerKind::Skip, depth - 2 - j));
    }
    layers.push(LayerSpec::tconv(1, 4, 2, 1));
    layers.push(LayerSpec::plain(LayerKind::Tanh));

    Network::from_spec(
        NetworkSpec {
            kind: NetworkKind::Generator,
            in_channels: 3,
            guide_channels: 0,
            input_multiple: 1 << depth,
            layers,
        },
        scale,
    )
}

/// Patch discriminator: 4×4 convolutions with strides 2,2,2,1,1 (70×70
/// receptive field) and a 1×1 sigmoid head producing a grid of patch
/// probabilities. `in_channels` is 1 for the transmission map alone, 4 when
/// the hazy image is appended as a condition.
pub fn build_discriminator<T: Scalar>(scale: f64, in_channels: usize) -> Result<Network<T>> {
    check_scale(scale)?;
    let strides = [2, 2, 2, 1, 1];
    let mut layers = Vec::new();
    for (i, (&c, &s)) in DISCRIMINATOR_CHANNELS.iter().zip(&strides).enumerate() {
        layers.push(LayerSpec::conv(scaled_channels(c, scale), 4, s, 1));
        layers.push(LayerSpec::plain(LayerKind::Batchnorm));
        if i > 0 {
            layers.push(LayerSpec::plain(LayerKind::Prelu));
        }
    }
    layers.push(LayerSpec::conv(1, 1, 1, 0));
    layers.push(LayerSpec::plain(LayerKind::Sigmoid));
    Network::from_spec(
        NetworkSpec {
            kind: NetworkKind::Discriminator,
            in_channels,
            guide_channels: 0,
            input_multiple: 1,
            layers,
        },
        scale,
    )
}

/// Hazy-feature extractor plus guided fusion network, with additive shortcuts
/// from each extractor stage to the fusion stage of the same width. All
/// layers are 3×3, stride 1, so the output keeps the input resolution.
pub fn build_dehazer<T: Scalar>(scale: f64) -> Result<Network<T>> {
    check_scale(scale)?;
    let mut layers = Vec::new();
    let stage = |layers: &mut Vec<LayerSpec>, c: usize, i: usize| {
        layers.push(LayerSpec::conv(scaled_channels(c, scale), 3, 1, 1));
        if i > 0 {
            layers.push(LayerSpec::plain(LayerKind::Batchnorm));
        }
        layers.push(LayerSpec::plain(LayerKind::Prelu));
    };
    for (i, &c) in DEHAZER_FEATURES.iter().enumerate() {
        stage(&mut layers, c, i);
        layers.push(LayerSpec::slot(LayerKind::Save, i));
    }
    layers.push(LayerSpec::conv(1, 3, 1, 1));
    layers.push(LayerSpec::plain(LayerKind::ConcatGuide));
    for (i, &c) in DEHAZER_FUSION.iter().enumerate() {
        stage(&mut layers, c, i);
        layers.push(LayerSpec::slot(
            LayerKind::Skip,
            DEHAZER_FUSION.len() - 1 - i,
        ));
    }
    layers.push(LayerSpec::conv(3, 3, 1, 1));
    layers.push(LayerSpec::plain(LayerKind::Tanh));
    Network::from_spec(
        NetworkSpec {
            kind: NetworkKind::Dehazer,
            in_channels: 3,
            guide_channels: 1,
            input_multiple: 1,
            layers,
        },
        scale,
    )
}
