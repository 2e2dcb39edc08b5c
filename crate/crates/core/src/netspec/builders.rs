use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Activation, LayerKind, LayerSpec, NetworkSpec, PoolKind};
use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaanVariant {
    ResnetBased,
    MobilenetLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdnVariant {
    Resnet18Like,
    Vgg16Like,
    BasicCnn,
}

impl FromStr for CaanVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet_based" => Ok(Self::ResnetBased),
            "mobilenet_like" => Ok(Self::MobilenetLike),
            _ => bail!(Spec, "unknown CAAN variant `{s}` (expected resnet_based or mobilenet_like)"),
        }
    }
}

impl FromStr for AdnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18_like" => Ok(Self::Resnet18Like),
            "vgg16_like" => Ok(Self::Vgg16Like),
            "basic_cnn" => Ok(Self::BasicCnn),
            _ => bail!(
                Spec,
                "unknown ADN variant `{s}` (expected resnet18_like, vgg16_like or basic_cnn)"
            ),
        }
    }
}

impl fmt::Display for CaanVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ResnetBased => "resnet_based",
            Self::MobilenetLike => "mobilenet_like",
        })
    }
}

impl fmt::Display for AdnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Resnet18Like => "resnet18_like",
            Self::Vgg16Like => "vgg16_like",
            Self::BasicCnn => "basic_cnn",
        })
    }
}

fn scaled(filters: usize, scale: f64) -> usize {
    ((filters as f64 * scale).round() as usize).max(1)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        bail!(Spec, "filter scale must be positive, got {scale}");
    }
    Ok(())
}

fn input(extent: usize, channels: usize) -> LayerSpec {
    LayerKind::Input {
        height: extent,
        width: extent,
        channels,
    }
    .into()
}

fn conv(kernel: usize, stride: usize, filters: usize, norm: bool, act: Activation) -> LayerSpec {
    LayerKind::Conv {
        kernel,
        stride,
        pad: kernel / 2,
        filters,
        norm,
        act: Some(act),
    }
    .into()
}

fn max_pool() -> LayerSpec {
    LayerKind::Pool {
        kind: PoolKind::Max,
        window: 2,
    }
    .into()
}

fn head(units: &[(usize, Activation)]) -> Vec<LayerSpec> {
    let mut rows: Vec<LayerSpec> = vec![
        LayerKind::Pool {
            kind: PoolKind::GlobalAvg,
            window: 0,
        }
        .into(),
        LayerKind::Flatten.into(),
    ];
    rows.extend(units.iter().map(|&(units, act)| {
        LayerSpec::from(LayerKind::Dense {
            units,
            act: Some(act),
        })
    }));
    rows
}

/// Colorization U-Net: `levels` stride-2 encoder stages and a mirrored
/// decoder with skip concatenations, ending in a 2-channel sigmoid.
pub fn build_unet(levels: usize, base_filters: usize, input_extent: usize) -> Result<NetworkSpec> {
    if levels < 2 {
        bail!(Spec, "U-Net needs at least 2 levels, got {levels}");
    }
    if base_filters == 0 {
        bail!(Spec, "U-Net base filter count must be positive");
    }
    let factor = 1usize.checked_shl(levels as u32).unwrap_or(0);
    if factor == 0 || input_extent == 0 || input_extent % factor != 0 {
        bail!(
            Spec,
            "U-Net input extent {input_extent} is not divisible by 2^{levels}"
        );
    }
    let filters = |i: usize| base_filters * (1usize << (i - 1).min(3));
    let mut layers = vec![input(input_extent, 1)];
    for i in 1..=levels {
        layers.push(
            LayerKind::Conv {
                kernel: 4,
                stride: 2,
                pad: 1,
                filters: filters(i),
                norm: i > 1,
                act: Some(Activation::LeakyRelu(0.2)),
            }
            .into(),
        );
    }
    // Row index of encoder level i is i.
    for j in (1..levels).rev() {
        layers.push(
            LayerKind::ConvTranspose {
                kernel: 2,
                stride: 2,
                filters: filters(j),
                norm: true,
                act: Some(Activation::Relu),
            }
            .into(),
        );
        layers.push(LayerKind::Concat { skip: j }.into());
    }
    layers.push(
        LayerKind::ConvTranspose {
            kernel: 2,
            stride: 2,
            filters: 2,
            norm: false,
            act: Some(Activation::Sigmoid),
        }
        .into(),
    );
    Ok(NetworkSpec::new(
        format!("unet-{levels}-{base_filters}-{input_extent}"),
        layers,
    ))
}

/// Attention network over a single-channel anomaly map, with attention
/// points 1..5 at extents `E, E/2, E/4, E/8, E/16` and a 2-way sigmoid head.
pub fn build_caan(variant: CaanVariant, scale: f64, input_extent: usize) -> Result<NetworkSpec> {
    build_caan_with_outputs(variant, scale, input_extent, 2)
}

/// [`build_caan`] with a sigmoid head of `outputs` units.
pub fn build_caan_with_outputs(
    variant: CaanVariant,
    scale: f64,
    input_extent: usize,
    outputs: usize,
) -> Result<NetworkSpec> {
    check_scale(scale)?;
    if outputs == 0 {
        bail!(Spec, "CAAN head needs at least one output");
    }
    let s = |f| scaled(f, scale);
    let relu = Activation::Relu;
    let mut layers = vec![input(input_extent, 1)];
    match variant {
        CaanVariant::ResnetBased => {
            layers.push(conv(7, 1, s(64), true, relu).at(1));
            for (p, f) in [(2, 64), (3, 128), (4, 256), (5, 512)] {
                layers.push(
                    LayerSpec::from(LayerKind::Residual {
                        kernel: 3,
                        stride: 2,
                        filters: s(f),
                    })
                    .at(p),
                );
            }
            layers.extend(head(&[(outputs, Activation::Sigmoid)]));
        }
        CaanVariant::MobilenetLike => {
            layers.push(conv(3, 1, s(16), true, relu).at(1));
            // (kernel, stride, filters, expansion) after MobileNetV3-Small.
            let stages: [&[(usize, usize, usize, usize)]; 4] = [
                &[(3, 2, 16, 16)],
                &[(3, 2, 24, 72), (3, 1, 24, 88)],
                &[
                    (5, 2, 40, 96),
                    (5, 1, 40, 240),
                    (5, 1, 40, 240),
                    (5, 1, 48, 120),
                    (5, 1, 48, 144),
                ],
                &[(5, 2, 96, 288), (5, 1, 96, 576), (5, 1, 96, 576)],
            ];
            for (p, stage) in (2u8..).zip(stages) {
                for (i, &(kernel, stride, filters, expand)) in stage.iter().enumerate() {
                    let mut row = LayerSpec::from(LayerKind::Bneck {
                        kernel,
                        stride,
                        filters: s(filters),
                        expand: s(expand),
                    });
                    if i + 1 == stage.len() {
                        row = row.at(p);
                    }
                    layers.push(row);
                }
            }
            layers.push(conv(1, 1, s(576), true, relu));
            layers.extend(head(&[(s(1280), relu), (outputs, Activation::Sigmoid)]));
        }
    }
    let spec = NetworkSpec::new(format!("caan-{variant}"), layers);
    super::infer_shapes(&spec)?;
    Ok(spec)
}

/// Classifier with attention points 1..5 aligned with [`build_caan`] at the
/// same input extent and a 1-logit sigmoid head. Input has 3 channels; see
/// [`NetworkSpec::with_input_channels`].
pub fn build_adn(variant: AdnVariant, scale: f64, input_extent: usize) -> Result<NetworkSpec> {
    check_scale(scale)?;
    let s = |f| scaled(f, scale);
    let relu = Activation::Relu;
    let mut layers = vec![input(input_extent, 3)];
    match variant {
        AdnVariant::BasicCnn => {
            for (p, f) in (1u8..).zip([64, 128, 256, 512, 512]) {
                layers.push(conv(3, 1, s(f), false, relu).at(p));
                layers.push(max_pool());
            }
            layers.extend(head(&[(1, Activation::Sigmoid)]));
        }
        AdnVariant::Resnet18Like => {
            layers.push(conv(7, 1, s(64), true, relu).at(1));
            layers.push(max_pool());
            for (p, f) in (2u8..).zip([64, 128, 256, 512]) {
                let stride = if p == 2 { 1 } else { 2 };
                layers.push(
                    LayerKind::Residual {
                        kernel: 3,
                        stride,
                        filters: s(f),
                    }
                    .into(),
                );
                layers.push(
                    LayerSpec::from(LayerKind::Residual {
                        kernel: 3,
                        stride: 1,
                        filters: s(f),
                    })
                    .at(p),
                );
            }
            layers.extend(head(&[(1, Activation::Sigmoid)]));
        }
        AdnVariant::Vgg16Like => {
            for (p, (reps, f)) in (1u8..).zip([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]) {
                for r in 0..reps {
                    let mut row = conv(3, 1, s(f), false, relu);
                    if r + 1 == reps {
                        row = row.at(p);
                    }
                    layers.push(row);
                }
                layers.push(max_pool());
            }
            layers.extend(head(&[
                (s(4096), relu),
                (s(4096), relu),
                (1, Activation::Sigmoid),
            ]));
        }
    }
    let spec = NetworkSpec::new(format!("adn-{variant}"), layers);
    super::infer_shapes(&spec)?;
    Ok(spec)
}
