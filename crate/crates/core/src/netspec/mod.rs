//! Declarative network descriptions.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`] rows whose first row
//! is the input declaration. Rows may be tagged as attention point `p`
//! (1–5). Skip connections are expressed with `concat`, which refers back to
//! an earlier row by index. The spec is pure data: [`infer_shapes`] checks it
//! and [`crate::nn::Network`] compiles it into something that runs.
//!
//! The text form has one row per line:
//!
//! ```text
//! network unet-3-8
//! input 32 32 1
//! conv 4 2 8 pad=1 leaky_relu:0.2
//! conv 4 2 16 pad=1 bn leaky_relu:0.2
//! conv_transpose 2 2 8 bn relu
//! concat #1
//! conv 3 1 8 pad=1 relu @1
//! ```

mod builders;
mod text;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use crate::tensor::{Activation, PoolKind};
use crate::error::{bail, Result};
pub use builders::{build_adn, build_caan, build_caan_with_outputs, build_unet, AdnVariant, CaanVariant};

/// Largest attention-point index a network may carry.
pub const MAX_ATTENTION_POINT: u8 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Convolution, optionally followed by batch norm and an activation.
    /// Carries a bias only when it is not batch-normalized.
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
        filters: usize,
        norm: bool,
        act: Option<Activation>,
    },
    ConvTranspose {
        kernel: usize,
        stride: usize,
        filters: usize,
        norm: bool,
        act: Option<Activation>,
    },
    /// Inverted bottleneck: 1×1 expansion, depthwise `kernel×kernel`, 1×1
    /// projection, with an identity shortcut when shapes allow.
    Bneck {
        kernel: usize,
        stride: usize,
        filters: usize,
        expand: usize,
    },
    /// Two `kernel×kernel` convolutions with batch norm and a shortcut that is
    /// projected by a strided 1×1 convolution when the shape changes.
    Residual {
        kernel: usize,
        stride: usize,
        filters: usize,
    },
    BatchNorm,
    Activation(Activation),
    Pool {
        kind: PoolKind,
        window: usize,
    },
    Flatten,
    Dense {
        units: usize,
        act: Option<Activation>,
    },
    /// Channel concatenation of the previous row with row `skip`.
    Concat {
        skip: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub attention_point: Option<u8>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            attention_point: None,
        }
    }

    pub fn at(mut self, p: u8) -> Self {
        self.attention_point = Some(p);
        self
    }
}

impl From<LayerKind> for LayerSpec {
    fn from(kind: LayerKind) -> Self {
        LayerSpec::new(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Output extents of one row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Extent {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Extent {
            height,
            width,
            channels,
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTable {
    pub layers: Vec<Extent>,
    pub points: BTreeMap<u8, Extent>,
}

impl ShapeTable {
    pub fn output(&self) -> Extent {
        *self.layers.last().expect("shape table is never empty")
    }

    pub fn point(&self, p: u8) -> Option<Extent> {
        self.points.get(&p).copied()
    }

    /// Number of rows that shrink the spatial extent (strided stages,
    /// pooling, global pooling).
    pub fn downsampling_points(&self) -> usize {
        self.layers
            .windows(2)
            .filter(|w| w[1].height < w[0].height || w[1].width < w[0].width)
            .count()
    }
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            name: name.into(),
            layers,
        }
    }

    pub fn input_extent(&self) -> Option<Extent> {
        match self.layers.first()?.kind {
            LayerKind::Input {
                height,
                width,
                channels,
            } => Some(Extent::new(height, width, channels)),
            _ => None,
        }
    }

    pub fn attention_points(&self) -> Vec<u8> {
        self.layers.iter().filter_map(|l| l.attention_point).collect()
    }

    /// Row index carrying attention point `p`.
    pub fn attention_row(&self, p: u8) -> Option<usize> {
        self.layers.iter().position(|l| l.attention_point == Some(p))
    }

    /// Replaces the input declaration's channel count.
    pub fn with_input_channels(mut self, channels: usize) -> Self {
        if let Some(LayerKind::Input { channels: c, .. }) = self.layers.first_mut().map(|l| &mut l.kind) {
            *c = channels;
        }
        self
    }

    /// Trainable parameter count (weights, biases, batch-norm scale/shift).
    pub fn parameter_count(&self) -> Result<usize> {
        let shapes = infer_shapes(self)?;
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let cin = if i == 0 { 0 } else { shapes.layers[i - 1].channels };
            total += match layer.kind {
                LayerKind::Conv {
                    kernel,
                    filters,
                    norm,
                    ..
                }
                | LayerKind::ConvTranspose {
                    kernel,
                    filters,
                    norm,
                    ..
                } => kernel * kernel * cin * filters + if norm { 2 * filters } else { filters },
                LayerKind::Bneck {
                    kernel,
                    filters,
                    expand,
                    ..
                } => cin * expand + 2 * expand + kernel * kernel * expand + 2 * expand + expand * filters + 2 * filters,
                LayerKind::Residual {
                    kernel,
                    stride,
                    filters,
                } => {
                    let mut n = kernel * kernel * cin * filters + 2 * filters;
                    n += kernel * kernel * filters * filters + 2 * filters;
                    if stride != 1 || cin != filters {
                        n += cin * filters + 2 * filters;
                    }
                    n
                }
                LayerKind::BatchNorm => 2 * cin,
                LayerKind::Dense { units, .. } => {
                    let e = shapes.layers[i - 1];
                    e.height * e.width * e.channels * units + units
                }
                _ => 0,
            };
        }
        Ok(total)
    }

    pub fn to_text(&self) -> String {
        text::print(self)
    }

    pub fn from_text(src: &str) -> Result<Self> {
        text::parse(src)
    }
}

fn strided(index: usize, size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        bail!(Spec, "layer {index}: kernel and stride must be positive");
    }
    if stride > 1 && size < stride {
        bail!(
            Spec,
            "layer {index}: cannot downsample extent {size} with stride {stride}"
        );
    }
    let padded = size + 2 * pad;
    if kernel > padded {
        bail!(
            Spec,
            "layer {index}: kernel {kernel} exceeds padded extent {padded} (non-positive output extent)"
        );
    }
    Ok((padded - kernel) / stride + 1)
}

/// Exact output extents for every row and every attention point.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<ShapeTable> {
    let Some(input) = spec.input_extent() else {
        bail!(Spec, "network `{}` must start with an input row", spec.name);
    };
    if input.height == 0 || input.width == 0 || input.channels == 0 {
        bail!(Spec, "layer 0: input extent {input} must be positive");
    }
    let mut layers = vec![input];
    let mut points = BTreeMap::new();
    let mut last_point: Option<(u8, usize)> = None;
    let mut downsamples = 0usize;
    if let Some(p) = spec.layers[0].attention_point {
        bail!(Spec, "layer 0: the input row cannot carry attention point {p}");
    }
    for (i, layer) in spec.layers.iter().enumerate().skip(1) {
        let prev = layers[i - 1];
        let (h, w, c) = (prev.height, prev.width, prev.channels);
        let out = match layer.kind {
            LayerKind::Input { .. } => bail!(Spec, "layer {i}: input row must come first"),
            LayerKind::Conv {
                kernel,
                stride,
                pad,
                filters,
                ..
            } => Extent::new(
                strided(i, h, kernel, stride, pad)?,
                strided(i, w, kernel, stride, pad)?,
                filters,
            ),
            LayerKind::ConvTranspose {
                kernel,
                stride,
                filters,
                ..
            } => {
                if kernel != stride || stride == 0 {
                    bail!(
                        Spec,
                        "layer {i}: transposed convolution needs kernel == stride (got {kernel}, {stride})"
                    );
                }
                Extent::new(h * stride, w * stride, filters)
            }
            LayerKind::Bneck {
                kernel,
                stride,
                filters,
                ..
            }
            | LayerKind::Residual {
                kernel,
                stride,
                filters,
            } => Extent::new(
                strided(i, h, kernel, stride, kernel / 2)?,
                strided(i, w, kernel, stride, kernel / 2)?,
                filters,
            ),
            LayerKind::BatchNorm | LayerKind::Activation(_) => prev,
            LayerKind::Pool { kind, window } => match kind {
                PoolKind::Max | PoolKind::Avg => {
                    if window == 0 || window > h || window > w {
                        bail!(
                            Spec,
                            "layer {i}: pool window {window} exceeds extent {h}×{w} (non-positive output extent)"
                        );
                    }
                    if h % window != 0 || w % window != 0 {
                        bail!(Spec, "layer {i}: pool window {window} does not divide {h}×{w}");
                    }
                    Extent::new(h / window, w / window, c)
                }
                PoolKind::GlobalAvg => Extent::new(1, 1, c),
                PoolKind::ChannelAvg => Extent::new(h, w, 1),
            },
            LayerKind::Flatten => Extent::new(1, 1, h * w * c),
            LayerKind::Dense { units, .. } => Extent::new(1, 1, units),
            LayerKind::Concat { skip } => {
                if skip >= i - 1 {
                    bail!(Spec, "layer {i}: concat must reference an earlier row, got #{skip}");
                }
                let s = layers[skip];
                if s.spatial() != prev.spatial() {
                    bail!(
                        Spec,
                        "layer {i}: concat of {prev} with row #{skip} ({s}) has mismatched extents"
                    );
                }
                Extent::new(h, w, c + s.channels)
            }
        };
        if out.height == 0 || out.width == 0 || out.channels == 0 {
            bail!(Spec, "layer {i}: non-positive output extent {out}");
        }
        if out.height < h || out.width < w {
            downsamples += 1;
        }
        if let Some(p) = layer.attention_point {
            if !(1..=MAX_ATTENTION_POINT).contains(&p) {
                bail!(Spec, "layer {i}: attention point {p} outside 1..={MAX_ATTENTION_POINT}");
            }
            if let Some((q, stage)) = last_point {
                if p <= q {
                    bail!(Spec, "layer {i}: attention point {p} does not follow point {q}");
                }
                if stage == downsamples {
                    bail!(
                        Spec,
                        "layer {i}: attention points {q} and {p} share a downsampling stage"
                    );
                }
            }
            last_point = Some((p, downsamples));
            points.insert(p, out);
        }
        layers.push(out);
    }
    Ok(ShapeTable { layers, points })
}

/// Checks that attention point `p` exists in both networks with equal
/// spatial extents. Channel counts may differ.
pub fn validate_attention_alignment(adn: &NetworkSpec, caan: &NetworkSpec, p: u8) -> Result<()> {
    if !(1..=MAX_ATTENTION_POINT).contains(&p) {
        bail!(Spec, "attention point {p} outside 1..={MAX_ATTENTION_POINT}");
    }
    let a = infer_shapes(adn)?;
    let c = infer_shapes(caan)?;
    let Some(ae) = a.point(p) else {
        bail!(Spec, "`{}` has no attention point {p}", adn.name);
    };
    let Some(ce) = c.point(p) else {
        bail!(Spec, "`{}` has no attention point {p}", caan.name);
    };
    if ae.spatial() != ce.spatial() {
        bail!(
            Spec,
            "attention point {p} extents differ: `{}` is {}×{}, `{}` is {}×{}",
            adn.name,
            ae.height,
            ae.width,
            caan.name,
            ce.height,
            ce.width
        );
    }
    Ok(())
}
