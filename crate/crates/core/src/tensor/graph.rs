//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order of the computation DAG. [`Graph::backward`] walks the tape
//! once in reverse, so each node is visited exactly once and gradients arriving
//! along several paths are summed before the node propagates them further.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{image_dims, Real, Tensor};
use crate::error::{bail, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
    ChannelAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPSILON: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const BCE_CLAMP: f64 = 1e-7;

/// Running mean/variance of a batch-norm layer, rounded to f32 precision.
/// Empty until the first training-mode pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn is_initialized(&self) -> bool {
        !self.mean.is_empty()
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        if self.is_initialized() {
            for (r, &m) in self.mean.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, &v) in self.var.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        } else {
            self.mean = mean.to_vec();
            self.var = var.to_vec();
        }
        // Held at f32 precision so checkpoints restore them exactly.
        for r in self.mean.iter_mut().chain(self.var.iter_mut()) {
            *r = *r as f32 as f64;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cout: usize,
        cols: Option<Vec<T>>,
    },
    ConvTranspose {
        x: Var,
        k: Var,
        dims: (usize, usize, usize, usize),
        stride: usize,
        cout: usize,
        permuted: Vec<T>,
    },
    Depthwise {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    BiasAdd {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        dims: (usize, usize, usize, usize),
        window: usize,
    },
    GlobalAvg {
        x: Var,
        dims: (usize, usize, usize, usize),
    },
    ChannelAvg {
        x: Var,
        channels: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    AddScalar {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Dense {
        x: Var,
        w: Var,
        rows: usize,
        fan_in: usize,
        units: usize,
    },
    Reshape {
        x: Var,
    },
    Bce {
        pred: Var,
        labels: Vec<f64>,
    },
    Mae {
        pred: Var,
        target: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recorded computation. Confined to one thread while in use.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    leaves: HashMap<Var, Tensor<T>>,
    params: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Gradient of the parameter registered under `id`.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }
}

fn same_shape_or_channel_broadcast(a: &[usize], b: &[usize]) -> Option<bool> {
    if a == b {
        return Some(false);
    }
    if a.len() == b.len()
        && !a.is_empty()
        && b[b.len() - 1] == 1
        && a[..a.len() - 1] == b[..b.len() - 1]
    {
        return Some(true);
    }
    None
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, value: Tensor<T>, id: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// 2-D convolution of an `[N×]H×W×Cin` input with a `k×k×Cin×Cout` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let (n, h, w, c) = image_dims(&xs)?;
        let [k, k2, cin, cout] = ks[..] else {
            bail!(Tensor, "conv2d kernel must be k×k×Cin×Cout, got {:?}", ks);
        };
        if k != k2 {
            bail!(Tensor, "conv2d kernel must be square, got {:?}", ks);
        }
        if cin != c {
            bail!(
                Tensor,
                "conv2d channel mismatch: input {:?} has {} channels, kernel {:?} expects {}",
                xs,
                c,
                ks,
                cin
            );
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_extent(h, k, stride, pad),
            kernels::conv_out_extent(w, k, stride, pad),
        ) else {
            bail!(
                Tensor,
                "conv2d kernel {} with stride {} and pad {} does not fit input {:?}",
                k,
                stride,
                pad,
                xs
            );
        };
        let geom = ConvGeom {
            n,
            h,
            w,
            c,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(self.value(x).data(), &geom));
        let a = cols.as_deref().unwrap_or(self.value(x).data());
        let out = kernels::matmul(a, self.value(kernel).data(), geom.rows(), geom.patch(), cout);
        let shape = if xs.len() == 3 {
            vec![ho, wo, cout]
        } else {
            vec![n, ho, wo, cout]
        };
        let rg = self.rg(&[x, kernel]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k: kernel,
                geom,
                cout,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution for the `kernel == stride` case: each input pixel
    /// expands into its own non-overlapping `stride×stride` output block.
    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let (n, h, w, cin) = image_dims(&xs)?;
        let [k, k2, kin, cout] = ks[..] else {
            bail!(Tensor, "conv2d_transpose kernel must be k×k×Cin×Cout, got {:?}", ks);
        };
        if stride == 0 {
            bail!(Tensor, "conv2d_transpose stride must be at least 1");
        }
        if k != k2 || k != stride {
            bail!(
                Tensor,
                "conv2d_transpose supports only square kernels equal to the stride (kernel {:?}, stride {})",
                ks,
                stride
            );
        }
        if kin != cin {
            bail!(
                Tensor,
                "conv2d_transpose channel mismatch: input {:?} vs kernel {:?}",
                xs,
                ks
            );
        }
        let blk = stride * stride * cout;
        // Kernel rearranged to [Cin, (di, dj, Cout)].
        let kd = self.value(kernel).data();
        let mut permuted = vec![T::zero(); cin * blk];
        for d in 0..stride * stride {
            for ci in 0..cin {
                for co in 0..cout {
                    permuted[ci * blk + d * cout + co] = kd[(d * cin + ci) * cout + co];
                }
            }
        }
        let rows = n * h * w;
        let y = kernels::matmul(self.value(x).data(), &permuted, rows, cin, blk);
        let (ho, wo) = (h * stride, w * stride);
        let mut out = vec![T::zero(); n * ho * wo * cout];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let src = &y[((b * h + i) * w + j) * blk..][..blk];
                    for di in 0..stride {
                        let dst = ((b * ho + i * stride + di) * wo + j * stride) * cout;
                        out[dst..dst + stride * cout]
                            .copy_from_slice(&src[di * stride * cout..(di + 1) * stride * cout]);
                    }
                }
            }
        }
        let shape = if xs.len() == 3 {
            vec![ho, wo, cout]
        } else {
            vec![n, ho, wo, cout]
        };
        let rg = self.rg(&[x, kernel]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose {
                x,
                k: kernel,
                dims: (n, h, w, cin),
                stride,
                cout,
                permuted,
            },
            rg,
        ))
    }

    /// Per-channel convolution with a `k×k×C×1` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let (n, h, w, c) = image_dims(&xs)?;
        let [k, k2, kc, 1] = ks[..] else {
            bail!(Tensor, "depthwise kernel must be k×k×C×1, got {:?}", ks);
        };
        if k != k2 || kc != c {
            bail!(
                Tensor,
                "depthwise kernel {:?} does not match input {:?}",
                ks,
                xs
            );
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_extent(h, k, stride, pad),
            kernels::conv_out_extent(w, k, stride, pad),
        ) else {
            bail!(Tensor, "depthwise kernel {} does not fit input {:?}", k, xs);
        };
        let geom = ConvGeom {
            n,
            h,
            w,
            c,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let shape = if xs.len() == 3 {
            vec![ho, wo, c]
        } else {
            vec![n, ho, wo, c]
        };
        let rg = self.rg(&[x, kernel]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Depthwise { x, k: kernel, geom }, rg))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(bias).shape();
        let c = *xs.last().unwrap_or(&0);
        if bs != [c] {
            bail!(Tensor, "bias {:?} does not match last axis of {:?}", bs, xs);
        }
        let b = self.value(bias).data().to_vec();
        let value = {
            let xv = self.value(x);
            let data = xv
                .data()
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(&b).map(|(&v, &bb)| v + bb))
                .collect();
            Tensor::new(xv.shape(), data)?
        };
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::BiasAdd { x, b: bias }, rg))
    }

    /// Batch normalization over all axes but the last.
    ///
    /// Training mode normalizes with the batch statistics and folds them into
    /// `stats`; evaluation mode uses `stats` and fails if they were never set.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap_or(&0);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            bail!(
                Tensor,
                "batchnorm gamma {:?} / beta {:?} do not match channels of {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                xs
            );
        }
        let xd = self.value(x).data();
        let m = xd.len() / c.max(1);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v.as_f64();
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut var = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for ((a, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v.as_f64() - mu;
                        *a += d * d;
                    }
                }
                var.iter_mut().for_each(|a| *a /= m as f64);
                let unbiased: Vec<f64> = if m > 1 {
                    var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
                } else {
                    var.clone()
                };
                stats.update(&mean, &unbiased);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                if !stats.is_initialized() {
                    bail!(Tensor, "uninitialized running statistics");
                }
                if stats.mean.len() != c {
                    bail!(
                        Tensor,
                        "running statistics hold {} channels, input has {}",
                        stats.mean.len(),
                        c
                    );
                }
                let inv = stats.var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                (stats.mean.clone(), inv)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(c) {
            for ch in 0..c {
                let xh = (row[ch].as_f64() - mean[ch]) * inv_std[ch];
                xhat.push(T::cast(xh));
                out.push(T::cast(g[ch].as_f64() * xh + bt[ch].as_f64()));
            }
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Pooling. `Max`/`Avg` use non-overlapping `window×window` tiles and need
    /// the window to divide both spatial extents; `GlobalAvg` maps
    /// `H×W×C → 1×1×C`; `ChannelAvg` maps `H×W×C → H×W×1`.
    pub fn pool(&mut self, x: Var, kind: PoolKind, window: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, h, w, c) = image_dims(&xs)?;
        let with_batch = |h: usize, w: usize, c: usize| {
            if xs.len() == 3 {
                vec![h, w, c]
            } else {
                vec![n, h, w, c]
            }
        };
        let xd = self.value(x).data();
        let rg = self.rg(&[x]);
        match kind {
            PoolKind::Max | PoolKind::Avg => {
                if window == 0 || window > h || window > w {
                    bail!(
                        Tensor,
                        "pool window {} exceeds spatial extent of {:?}",
                        window,
                        xs
                    );
                }
                if h % window != 0 || w % window != 0 {
                    bail!(
                        Tensor,
                        "pool window {} does not divide spatial extent of {:?}",
                        window,
                        xs
                    );
                }
                let shape = with_batch(h / window, w / window, c);
                if kind == PoolKind::Max {
                    let (out, argmax) = kernels::max_pool(xd, (n, h, w, c), window);
                    let value = Tensor::new(&shape, out)?;
                    Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
                } else {
                    let out = kernels::avg_pool(xd, (n, h, w, c), window);
                    let value = Tensor::new(&shape, out)?;
                    Ok(self.push(
                        value,
                        Op::AvgPool {
                            x,
                            dims: (n, h, w, c),
                            window,
                        },
                        rg,
                    ))
                }
            }
            PoolKind::GlobalAvg => {
                let mut out = Vec::with_capacity(n * c);
                let inv = 1.0 / (h * w) as f64;
                for img in xd.chunks_exact(h * w * c) {
                    let mut acc = vec![0.0f64; c];
                    for px in img.chunks_exact(c) {
                        for (a, &v) in acc.iter_mut().zip(px) {
                            *a += v.as_f64();
                        }
                    }
                    out.extend(acc.iter().map(|&a| T::cast(a * inv)));
                }
                let value = Tensor::new(&with_batch(1, 1, c), out)?;
                Ok(self.push(
                    value,
                    Op::GlobalAvg {
                        x,
                        dims: (n, h, w, c),
                    },
                    rg,
                ))
            }
            PoolKind::ChannelAvg => {
                let out = xd
                    .chunks_exact(c)
                    .map(|px| T::cast(px.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64))
                    .collect();
                let value = Tensor::new(&with_batch(h, w, 1), out)?;
                Ok(self.push(value, Op::ChannelAvg { x, channels: c }, rg))
            }
        }
    }

    /// Elementwise activation. Sigmoid outputs are kept strictly inside (0, 1).
    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let value = match kind {
            Activation::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu(alpha) => {
                let a = T::cast(alpha as f64);
                xv.map(|v| if v > T::zero() { v } else { a * v })
            }
            Activation::Sigmoid => xv.map(sigmoid),
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Act { x, kind }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<bool> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        match same_shape_or_channel_broadcast(sa, sb) {
            Some(bc) => Ok(bc),
            None => bail!(
                Tensor,
                "{} shape mismatch: {:?} vs {:?}",
                name,
                sa,
                sb
            ),
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = if broadcast {
            let c = *av.shape().last().unwrap();
            av.data()
                .chunks_exact(c)
                .zip(bv.data())
                .flat_map(|(row, &s)| row.iter().map(move |&v| (v, s)))
                .map(|(x, y)| f(x, y))
                .collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    /// Elementwise sum; `b` may be `…×1` and is then broadcast over channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary(a, b, "add")?;
        let value = self.zip_broadcast(a, b, broadcast, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, broadcast }, rg))
    }

    /// Elementwise product; `b` may be `…×1` and is then broadcast over channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary(a, b, "mul")?;
        let value = self.zip_broadcast(a, b, broadcast, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Concatenates two image tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            bail!(Tensor, "concat shape mismatch: {:?} vs {:?}", sa, sb);
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for (ra, rb) in ad.chunks_exact(ca).zip(bd.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, ca, cb }, rg))
    }

    /// Fully connected layer: the input is read as `[N, F]` (everything after
    /// the first axis flattened) and multiplied by an `F×U` weight.
    pub fn dense(&mut self, x: Var, weight: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let rows = *xs.first().unwrap_or(&1);
        let fan_in = self.value(x).len() / rows.max(1);
        let [wf, units] = ws[..] else {
            bail!(Tensor, "dense weight must be F×U, got {:?}", ws);
        };
        if wf != fan_in {
            bail!(
                Tensor,
                "dense input {:?} has {} features, weight {:?} expects {}",
                xs,
                fan_in,
                ws,
                wf
            );
        }
        let out = kernels::matmul(self.value(x).data(), self.value(weight).data(), rows, fan_in, units);
        let value = Tensor::new(&[rows, units], out)?;
        let rg = self.rg(&[x, weight]);
        Ok(self.push(
            value,
            Op::Dense {
                x,
                w: weight,
                rows,
                fan_in,
                units,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Predictions are clamped to `[1e-7, 1 − 1e-7]` before the log.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != labels.len() || labels.is_empty() {
            bail!(
                Tensor,
                "bce expects one label per prediction: {} predictions, {} labels",
                pv.len(),
                labels.len()
            );
        }
        let mut total = 0.0f64;
        for (&p, &y) in pv.data().iter().zip(labels) {
            let p = p.as_f64();
            if !(0.0..=1.0).contains(&p) {
                bail!(Tensor, "bce prediction {} lies outside [0, 1]", p);
            }
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let value = Tensor::scalar(T::cast(total / labels.len() as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target of the same length.
    /// The subgradient at zero error is 0.
    pub fn mae(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || target.is_empty() {
            bail!(
                Tensor,
                "mae expects one target per prediction: {} predictions, {} targets",
                pv.len(),
                target.len()
            );
        }
        let total: f64 = pv.data().iter().zip(target).map(|(&p, &t)| (p.as_f64() - t).abs()).sum();
        let value = Tensor::scalar(T::cast(total / target.len() as f64));
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::Mae {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::cast(s)), Op::Sum { x }, rg)
    }

    /// Reverse pass from a scalar `loss`. Each call starts from zero, so two
    /// calls on the same graph return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            bail!(
                Tensor,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut result = Gradients {
            leaves: HashMap::new(),
            params: BTreeMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                };
                if let Some(id) = node.param {
                    match result.params.get_mut(&id) {
                        Some(acc) => acc.data.iter_mut().zip(&t.data).for_each(|(a, &b)| *a += b),
                        None => {
                            result.params.insert(id, t.clone());
                        }
                    }
                }
                result.leaves.insert(Var(i), t);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                k,
                geom,
                cout,
                cols,
            } => {
                let (rows, patch) = (geom.rows(), geom.patch());
                let xd = self.value(*x).data();
                let a = cols.as_deref().unwrap_or(xd);
                self.accumulate(grads, *k, |dk| {
                    kernels::matmul_at_b_add(a, g, patch, rows, *cout, dk)
                });
                let kd = self.value(*k).data();
                self.accumulate(grads, *x, |dx| {
                    if geom.is_pointwise() {
                        kernels::matmul_a_bt_add(g, kd, rows, *cout, patch, dx);
                    } else {
                        let mut dcols = vec![T::zero(); rows * patch];
                        kernels::matmul_a_bt_add(g, kd, rows, *cout, patch, &mut dcols);
                        kernels::col2im_add(&dcols, geom, dx);
                    }
                });
            }
            Op::ConvTranspose {
                x,
                k,
                dims: (n, h, w, cin),
                stride,
                cout,
                permuted,
            } => {
                let (n, h, w, cin, s, cout) = (*n, *h, *w, *cin, *stride, *cout);
                let blk = s * s * cout;
                let (ho, wo) = (h * s, w * s);
                let mut gy = vec![T::zero(); n * h * w * blk];
                for b in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let dst = &mut gy[((b * h + i) * w + j) * blk..][..blk];
                            for di in 0..s {
                                let src = ((b * ho + i * s + di) * wo + j * s) * cout;
                                dst[di * s * cout..(di + 1) * s * cout]
                                    .copy_from_slice(&g[src..src + s * cout]);
                            }
                        }
                    }
                }
                let rows = n * h * w;
                self.accumulate(grads, *x, |dx| {
                    kernels::matmul_a_bt_add(&gy, permuted, rows, blk, cin, dx)
                });
                let xd = self.value(*x).data();
                self.accumulate(grads, *k, |dk| {
                    let mut dp = vec![T::zero(); cin * blk];
                    kernels::matmul_at_b_add(xd, &gy, cin, rows, blk, &mut dp);
                    for d in 0..s * s {
                        for ci in 0..cin {
                            for co in 0..cout {
                                dk[(d * cin + ci) * cout + co] += dp[ci * blk + d * cout + co];
                            }
                        }
                    }
                });
            }
            Op::Depthwise { x, k, geom } => {
                let xd = self.value(*x).data();
                let kd = self.value(*k).data();
                let mut dx = self.nodes[x.0]
                    .requires_grad
                    .then(|| vec![T::zero(); xd.len()]);
                let mut dk = self.nodes[k.0]
                    .requires_grad
                    .then(|| vec![T::zero(); kd.len()]);
                kernels::depthwise_backward(xd, kd, g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, |acc| add_into(acc, &dx));
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, |acc| add_into(acc, &dk));
                }
            }
            Op::BiasAdd { x, b } => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
                let c = self.value(*b).len();
                self.accumulate(grads, *b, |db| {
                    let mut acc = vec![0.0f64; c];
                    for row in g.chunks_exact(c) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    for (d, a) in db.iter_mut().zip(acc) {
                        *d += T::cast(a);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (rg, rx) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += rg[ch].as_f64();
                        sum_gx[ch] += rg[ch].as_f64() * rx[ch].as_f64();
                    }
                }
                self.accumulate(grads, *gamma, |dg| {
                    for (d, &s) in dg.iter_mut().zip(&sum_gx) {
                        *d += T::cast(s);
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for (d, &s) in db.iter_mut().zip(&sum_g) {
                        *d += T::cast(s);
                    }
                });
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |dx| {
                    for ((dr, gr), xr) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let scale = gam[ch].as_f64() * inv_std[ch];
                            let v = if *train {
                                scale / m
                                    * (m * gr[ch].as_f64()
                                        - sum_g[ch]
                                        - xr[ch].as_f64() * sum_gx[ch])
                            } else {
                                scale * gr[ch].as_f64()
                            };
                            dr[ch] += T::cast(v);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                self.accumulate(grads, *x, |dx| {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i as usize] += gv;
                    }
                });
            }
            Op::AvgPool { x, dims, window } => {
                self.accumulate(grads, *x, |dx| kernels::avg_pool_backward(g, *dims, *window, dx));
            }
            Op::GlobalAvg { x, dims: (_, h, w, c) } => {
                let inv = T::cast(1.0 / (h * w) as f64);
                let (hw, c) = (h * w, *c);
                self.accumulate(grads, *x, |dx| {
                    for (img, go) in dx.chunks_exact_mut(hw * c).zip(g.chunks_exact(c)) {
                        for px in img.chunks_exact_mut(c) {
                            for (d, &gv) in px.iter_mut().zip(go) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::ChannelAvg { x, channels } => {
                let inv = T::cast(1.0 / *channels as f64);
                self.accumulate(grads, *x, |dx| {
                    for (px, &gv) in dx.chunks_exact_mut(*channels).zip(g) {
                        px.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Act { x, kind } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                self.accumulate(grads, *x, |dx| match kind {
                    Activation::Relu => {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                            if xv > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                    Activation::LeakyRelu(alpha) => {
                        let a = T::cast(*alpha as f64);
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                            *d += if xv > T::zero() { gv } else { a * gv };
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(yd) {
                            *d += gv * yv * (T::one() - yv);
                        }
                    }
                });
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| {
                    if *broadcast {
                        let c = g.len() / db.len();
                        for (d, row) in db.iter_mut().zip(g.chunks_exact(c)) {
                            *d += T::cast(row.iter().map(|v| v.as_f64()).sum::<f64>());
                        }
                    } else {
                        add_into(db, g);
                    }
                });
            }
            Op::Mul { a, b, broadcast } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |da| {
                    if *broadcast {
                        let c = g.len() / bd.len();
                        for ((d, gr), &bv) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(bd) {
                            for (dd, &gv) in d.iter_mut().zip(gr) {
                                *dd += gv * bv;
                            }
                        }
                    } else {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    if *broadcast {
                        let c = g.len() / db.len();
                        for ((d, gr), ar) in db.iter_mut().zip(g.chunks_exact(c)).zip(ad.chunks_exact(c)) {
                            let s: f64 = gr.iter().zip(ar).map(|(&gv, &av)| (gv * av).as_f64()).sum();
                            *d += T::cast(s);
                        }
                    } else {
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                            *d += gv * av;
                        }
                    }
                });
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, |dx| add_into(dx, g)),
            Op::Scale { x, factor } => self.accumulate(grads, *x, |dx| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv * *factor;
                }
            }),
            Op::Concat { a, b, ca, cb } => {
                let c = ca + cb;
                self.accumulate(grads, *a, |da| {
                    for (d, row) in da.chunks_exact_mut(*ca).zip(g.chunks_exact(c)) {
                        add_into(d, &row[..*ca]);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, row) in db.chunks_exact_mut(*cb).zip(g.chunks_exact(c)) {
                        add_into(d, &row[*ca..]);
                    }
                });
            }
            Op::Dense {
                x,
                w,
                rows,
                fan_in,
                units,
            } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                self.accumulate(grads, *w, |dw| {
                    kernels::matmul_at_b_add(xd, g, *fan_in, *rows, *units, dw)
                });
                self.accumulate(grads, *x, |dx| {
                    kernels::matmul_a_bt_add(g, wd, *rows, *units, *fan_in, dx)
                });
            }
            Op::Reshape { x } => self.accumulate(grads, *x, |dx| add_into(dx, g)),
            Op::Bce { pred, labels } => {
                let pd = self.value(*pred).data();
                let n = labels.len() as f64;
                let go = g[0].as_f64();
                self.accumulate(grads, *pred, |dp| {
                    for ((d, &p), &y) in dp.iter_mut().zip(pd).zip(labels) {
                        let p = p.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *d += T::cast(go * (-y / p + (1.0 - y) / (1.0 - p)) / n);
                    }
                });
            }
            Op::Mae { pred, target } => {
                let pd = self.value(*pred).data();
                let scale = g[0].as_f64() / target.len() as f64;
                self.accumulate(grads, *pred, |dp| {
                    for ((d, &p), &t) in dp.iter_mut().zip(pd).zip(target) {
                        let diff = p.as_f64() - t;
                        if diff != 0.0 {
                            *d += T::cast(scale * diff.signum());
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gv));
            }
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Logistic function clamped into the open interval (0, 1) of `T`.
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    let one = T::one();
    let s = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::cast(2.0);
    s.max(T::min_positive_value()).min(hi)
}
