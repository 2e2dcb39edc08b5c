//! Executable networks compiled from a [`NetworkSpec`].
//!
//! A [`Network`] owns its parameters and batch-norm running statistics. A
//! forward pass binds the parameters onto a [`Graph`] as leaves with stable
//! ids (`offset + index`), so gradients for several networks sharing one
//! graph stay apart. Rows tagged with an attention point call a hook that
//! may replace the row's output; that is how external attention is injected.

use crate::error::{bail, Result};
use crate::netspec::{infer_shapes, Extent, LayerKind, NetworkSpec, ShapeTable};
use crate::rng;
use crate::tensor::{
    he_uniform, Activation, BatchNormStats, Checkpoint, Graph, Mode, PoolKind, Real, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnitKind {
    Conv,
    Transpose,
    Depthwise,
    Dense,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct Unit {
    kind: UnitKind,
    weight: usize,
    bias: Option<usize>,
    bn: Option<Bn>,
    stride: usize,
    pad: usize,
    act: Option<Activation>,
}

#[derive(Clone, Debug)]
enum Layer {
    Input,
    Unit(Unit),
    Bneck {
        expand: Unit,
        depthwise: Unit,
        project: Unit,
        residual: bool,
    },
    Residual {
        conv1: Unit,
        conv2: Unit,
        shortcut: Option<Unit>,
    },
    BatchNorm(Bn),
    Activation(Activation),
    Pool(PoolKind, usize),
    Flatten,
    Concat(usize),
}

/// Result of [`Network::forward`]: the final output and each row's output.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    pub layers: Vec<Var>,
}

/// Callback invoked at attention-tagged rows with `(graph, p, row output)`.
pub type Hook<'a, T> = dyn FnMut(&mut Graph<T>, u8, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    shapes: ShapeTable,
    layers: Vec<Layer>,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    stats: Vec<BatchNormStats>,
    stat_names: Vec<String>,
}

struct Builder<'a, T: Real, R: rand::Rng> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    stat_names: Vec<String>,
    rng: &'a mut R,
}

impl<T: Real, R: rand::Rng> Builder<'_, T, R> {
    fn param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Bn {
        let gamma = self.param(format!("{prefix}.gamma"), Tensor::ones(&[c]));
        let beta = self.param(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        self.stat_names.push(prefix.to_string());
        Bn {
            gamma,
            beta,
            stats: self.stat_names.len() - 1,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn unit(
        &mut self,
        prefix: &str,
        kind: UnitKind,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        act: Option<Activation>,
    ) -> Unit {
        let (shape, fan_in) = match kind {
            UnitKind::Conv => (vec![k, k, cin, cout], k * k * cin),
            UnitKind::Transpose => (vec![k, k, cin, cout], cin),
            UnitKind::Depthwise => (vec![k, k, cin, 1], k * k),
            UnitKind::Dense => (vec![cin, cout], cin),
        };
        let w = he_uniform(&shape, fan_in, self.rng);
        let weight = self.param(format!("{prefix}.weight"), w);
        let (bias, bn) = if norm {
            (None, Some(self.bn(&format!("{prefix}.bn"), cout)))
        } else {
            (Some(self.param(format!("{prefix}.bias"), Tensor::zeros(&[cout]))), None)
        };
        Unit {
            kind,
            weight,
            bias,
            bn,
            stride,
            pad,
            act,
        }
    }
}

impl<T: Real> Network<T> {
    /// Compiles `spec` with He-uniform weights, zero biases, unit BN scale and
    /// zero BN shift, drawn from a stream derived from `seed`.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(spec)?;
        let mut rng = rng::stream(seed, "init");
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            stat_names: Vec::new(),
            rng: &mut rng,
        };
        let relu = Some(Activation::Relu);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, row) in spec.layers.iter().enumerate() {
            let cin = if i == 0 { 0 } else { shapes.layers[i - 1].channels };
            let p = i.to_string();
            let layer = match row.kind {
                LayerKind::Input { .. } => Layer::Input,
                LayerKind::Conv {
                    kernel,
                    stride,
                    pad,
                    filters,
                    norm,
                    act,
                } => Layer::Unit(b.unit(&p, UnitKind::Conv, kernel, cin, filters, stride, pad, norm, act)),
                LayerKind::ConvTranspose {
                    kernel,
                    stride,
                    filters,
                    norm,
                    act,
                } => Layer::Unit(b.unit(&p, UnitKind::Transpose, kernel, cin, filters, stride, 0, norm, act)),
                LayerKind::Bneck {
                    kernel,
                    stride,
                    filters,
                    expand,
                } => Layer::Bneck {
                    expand: b.unit(&format!("{p}.expand"), UnitKind::Conv, 1, cin, expand, 1, 0, true, relu),
                    depthwise: b.unit(
                        &format!("{p}.depthwise"),
                        UnitKind::Depthwise,
                        kernel,
                        expand,
                        expand,
                        stride,
                        kernel / 2,
                        true,
                        relu,
                    ),
                    project: b.unit(&format!("{p}.project"), UnitKind::Conv, 1, expand, filters, 1, 0, true, None),
                    residual: stride == 1 && cin == filters,
                },
                LayerKind::Residual {
                    kernel,
                    stride,
                    filters,
                } => Layer::Residual {
                    conv1: b.unit(
                        &format!("{p}.conv1"),
                        UnitKind::Conv,
                        kernel,
                        cin,
                        filters,
                        stride,
                        kernel / 2,
                        true,
                        relu,
                    ),
                    conv2: b.unit(
                        &format!("{p}.conv2"),
                        UnitKind::Conv,
                        kernel,
                        filters,
                        filters,
                        1,
                        kernel / 2,
                        true,
                        None,
                    ),
                    shortcut: (stride != 1 || cin != filters).then(|| {
                        b.unit(&format!("{p}.shortcut"), UnitKind::Conv, 1, cin, filters, stride, 0, true, None)
                    }),
                },
                LayerKind::BatchNorm => Layer::BatchNorm(b.bn(&format!("{p}.bn"), cin)),
                LayerKind::Activation(a) => Layer::Activation(a),
                LayerKind::Pool { kind, window } => Layer::Pool(kind, window),
                LayerKind::Flatten => Layer::Flatten,
                LayerKind::Dense { units, act } => {
                    let e = shapes.layers[i - 1];
                    let fan_in = e.height * e.width * e.channels;
                    Layer::Unit(b.unit(&p, UnitKind::Dense, 0, fan_in, units, 1, 0, false, act))
                }
                LayerKind::Concat { skip } => Layer::Concat(skip),
            };
            layers.push(layer);
        }
        let Builder {
            params,
            names,
            stat_names,
            ..
        } = b;
        Ok(Network {
            spec: spec.clone(),
            shapes,
            layers,
            params,
            names,
            stats: vec![BatchNormStats::default(); stat_names.len()],
            stat_names,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &ShapeTable {
        &self.shapes
    }

    pub fn input_extent(&self) -> Extent {
        self.shapes.layers[0]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.stats
    }

    /// Same network with parameters and statistics converted to `U`.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            stats: self.stats.clone(),
            stat_names: self.stat_names.clone(),
        }
    }

    /// Zeroes the weights and bias of the last parametric row, so a sigmoid
    /// head outputs exactly 0.5 everywhere.
    pub fn zero_head(&mut self) {
        let Some(Layer::Unit(u)) = self.layers.iter().rev().find(|l| matches!(l, Layer::Unit(_))) else {
            return;
        };
        let ids: Vec<usize> = [Some(u.weight), u.bias].into_iter().flatten().collect();
        for id in ids {
            self.params[id].data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Sets every uninitialized running mean to 0 and variance to 1, so an
    /// untrained network can run in evaluation mode.
    pub fn init_running_stats(&mut self) {
        for (name, s) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            if s.is_initialized() {
                continue;
            }
            let gamma = format!("{name}.gamma");
            let c = self
                .names
                .iter()
                .position(|n| *n == gamma)
                .map_or(0, |i| self.params[i].len());
            s.mean = vec![0.0; c];
            s.var = vec![1.0; c];
        }
    }

    /// Registers every parameter on `g` with ids `offset..offset + n`.
    pub fn bind(&self, g: &mut Graph<T>, offset: usize) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(p.clone(), offset + i))
            .collect()
    }

    fn run_unit(
        g: &mut Graph<T>,
        stats: &mut [BatchNormStats],
        vars: &[Var],
        u: &Unit,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = vars[u.weight];
        let mut y = match u.kind {
            UnitKind::Conv => g.conv2d(x, w, u.stride, u.pad)?,
            UnitKind::Transpose => g.conv2d_transpose(x, w, u.stride)?,
            UnitKind::Depthwise => g.depthwise_conv2d(x, w, u.stride, u.pad)?,
            UnitKind::Dense => g.dense(x, w)?,
        };
        if let Some(b) = u.bias {
            y = g.bias_add(y, vars[b])?;
        }
        if let Some(bn) = u.bn {
            y = g.batchnorm(y, vars[bn.gamma], vars[bn.beta], &mut stats[bn.stats], mode)?;
        }
        if let Some(a) = u.act {
            y = g.activate(y, a);
        }
        Ok(y)
    }

    /// Runs the network on `x` (`N×H×W×C`). `vars` must come from
    /// [`Network::bind`] on the same graph. Training mode updates batch-norm
    /// running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        mode: Mode,
        mut hook: Option<&mut Hook<'_, T>>,
    ) -> Result<Forward> {
        if vars.len() != self.params.len() {
            bail!(
                Model,
                "`{}` expects {} bound parameters, got {}",
                self.spec.name,
                self.params.len(),
                vars.len()
            );
        }
        let input = self.shapes.layers[0];
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1..] != [input.height, input.width, input.channels] {
            bail!(
                Model,
                "`{}` expects N×{}×{}×{} input, got {:?}",
                self.spec.name,
                input.height,
                input.width,
                input.channels,
                xs
            );
        }
        let n = xs[0];
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let stats = &mut self.stats;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = outs.last().copied().unwrap_or(x);
            let mut y = match layer {
                Layer::Input => x,
                Layer::Unit(u) => Self::run_unit(g, stats, vars, u, prev, mode)?,
                Layer::Bneck {
                    expand,
                    depthwise,
                    project,
                    residual,
                } => {
                    let h = Self::run_unit(g, stats, vars, expand, prev, mode)?;
                    let h = Self::run_unit(g, stats, vars, depthwise, h, mode)?;
                    let h = Self::run_unit(g, stats, vars, project, h, mode)?;
                    if *residual {
                        g.add(h, prev)?
                    } else {
                        h
                    }
                }
                Layer::Residual {
                    conv1,
                    conv2,
                    shortcut,
                } => {
                    let h = Self::run_unit(g, stats, vars, conv1, prev, mode)?;
                    let h = Self::run_unit(g, stats, vars, conv2, h, mode)?;
                    let s = match shortcut {
                        Some(sc) => Self::run_unit(g, stats, vars, sc, prev, mode)?,
                        None => prev,
                    };
                    let sum = g.add(h, s)?;
                    g.activate(sum, Activation::Relu)
                }
                Layer::BatchNorm(bn) => g.batchnorm(prev, vars[bn.gamma], vars[bn.beta], &mut stats[bn.stats], mode)?,
                Layer::Activation(a) => g.activate(prev, *a),
                Layer::Pool(kind, window) => g.pool(prev, *kind, *window)?,
                Layer::Flatten => {
                    let len = g.value(prev).len();
                    g.reshape(prev, &[n, len / n.max(1)])?
                }
                Layer::Concat(skip) => g.concat_channels(prev, outs[*skip])?,
            };
            if let (Some(p), Some(h)) = (self.spec.layers[i].attention_point, hook.as_deref_mut()) {
                y = h(g, p, y)?;
            }
            outs.push(y);
        }
        Ok(Forward {
            output: *outs.last().expect("network has an input row"),
            layers: outs,
        })
    }

    /// Evaluation-mode output for a batch, on a throwaway graph.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, 0);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv, Mode::Eval, None)?;
        Ok(g.value(out.output).clone())
    }

    /// Appends parameters and running statistics under `prefix`.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, p) in self.names.iter().zip(&self.params) {
            ck.push(format!("{prefix}{name}"), p.cast());
        }
        for (name, s) in self.stat_names.iter().zip(&self.stats) {
            let to_tensor = |v: &[f64]| Tensor::from_fn(&[v.len()], |i| v[i] as f32);
            ck.push(format!("{prefix}{name}.running_mean"), to_tensor(&s.mean));
            ck.push(format!("{prefix}{name}.running_var"), to_tensor(&s.var));
        }
    }

    /// Loads everything written by [`Network::write_to`] under `prefix`.
    pub fn read_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            let key = format!("{prefix}{name}");
            let Some(t) = ck.get(&key) else {
                bail!(Checkpoint, "missing tensor {key}");
            };
            if t.shape() != p.shape() {
                bail!(
                    Checkpoint,
                    "tensor {key} has shape {:?}, network expects {:?}",
                    t.shape(),
                    p.shape()
                );
            }
            *p = t.cast();
        }
        for (name, s) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            let get = |suffix: &str| -> Result<Vec<f64>> {
                let key = format!("{prefix}{name}.{suffix}");
                match ck.get(&key) {
                    Some(t) => Ok(t.data().iter().map(|&v| v as f64).collect()),
                    None => bail!(Checkpoint, "missing tensor {key}"),
                }
            };
            s.mean = get("running_mean")?;
            s.var = get("running_var")?;
            if s.mean.len() != s.var.len() {
                bail!(Checkpoint, "running statistics of {prefix}{name} disagree in length");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{build_adn, build_caan, build_unet, AdnVariant, CaanVariant};
    use proptest::prelude::*;

    fn extent_of(t: &Tensor<f32>) -> Extent {
        match t.shape() {
            [_, h, w, c] => Extent::new(*h, *w, *c),
            [_, f] => Extent::new(1, 1, *f),
            s => panic!("unexpected shape {s:?}"),
        }
    }

    fn check_forward_extents(spec: &NetworkSpec, seed: u64) {
        let mut net = Network::<f32>::new(spec, seed).unwrap();
        let e = net.input_extent();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, 0);
        let mut r = rng::stream(seed, "x");
        let x = he_uniform(&[2, e.height, e.width, e.channels], 3, &mut r);
        let xv = g.constant(x);
        let out = net.forward(&mut g, &vars, xv, Mode::Train, None).unwrap();
        let got: Vec<Extent> = out.layers.iter().map(|&v| extent_of(g.value(v))).collect();
        assert_eq!(got, net.shapes().layers, "{}", spec.name);
    }

    #[test]
    fn parameter_counts_agree_with_spec() {
        for spec in [
            build_unet(3, 4, 16).unwrap(),
            build_caan(CaanVariant::ResnetBased, 0.125, 32).unwrap(),
            build_caan(CaanVariant::MobilenetLike, 0.125, 32).unwrap(),
            build_adn(AdnVariant::Vgg16Like, 0.0625, 32).unwrap(),
        ] {
            let net = Network::<f32>::new(&spec, 1).unwrap();
            assert_eq!(net.parameter_count(), spec.parameter_count().unwrap(), "{}", spec.name);
        }
    }

    #[test]
    fn hook_sees_each_point_and_can_replace() {
        let spec = build_adn(AdnVariant::BasicCnn, 0.125, 32).unwrap();
        let mut net = Network::<f32>::new(&spec, 3).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, 0);
        let x = g.constant(Tensor::ones(&[1, 32, 32, 3]));
        let mut seen = Vec::new();
        let mut hook = |g: &mut Graph<f32>, p: u8, v: Var| {
            seen.push((p, g.value(v).shape()[1]));
            Ok(g.scale(v, 0.0))
        };
        let out = net.forward(&mut g, &vars, x, Mode::Eval, Some(&mut hook)).unwrap();
        assert_eq!(seen, vec![(1, 32), (2, 16), (3, 8), (4, 4), (5, 2)]);
        // Zeroed features leave only the head bias: sigmoid(0).
        assert_eq!(g.value(out.output).data(), &[0.5]);
    }

    #[test]
    fn zero_head_outputs_half() {
        let spec = build_unet(2, 4, 8).unwrap();
        let mut net = Network::<f32>::new(&spec, 9).unwrap();
        net.zero_head();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, 0);
        let x = g.constant(Tensor::from_fn(&[2, 8, 8, 1], |i| (i % 7) as f32 / 7.0));
        let out = net.forward(&mut g, &vars, x, Mode::Train, None).unwrap();
        assert!(g.value(out.output).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_before_training_fails_for_bn_networks() {
        let spec = build_caan(CaanVariant::ResnetBased, 0.125, 16).unwrap();
        let mut net = Network::<f32>::new(&spec, 0).unwrap();
        let err = net.predict(&Tensor::zeros(&[1, 16, 16, 1])).unwrap_err().to_string();
        assert!(err.contains("uninitialized running statistics"), "{err}");
    }

    #[test]
    fn wrong_input_is_rejected() {
        let spec = build_adn(AdnVariant::BasicCnn, 0.125, 32).unwrap();
        let mut net = Network::<f32>::new(&spec, 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 32, 32, 1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let spec = build_caan(CaanVariant::MobilenetLike, 0.125, 16).unwrap();
        let mut net = Network::<f32>::new(&spec, 5).unwrap();
        let x = Tensor::from_fn(&[3, 16, 16, 1], |i| ((i * 37) % 11) as f32 / 11.0);
        let mut g = Graph::new();
        let vars = net.bind(&mut g, 0);
        let xv = g.constant(x.clone());
        net.forward(&mut g, &vars, xv, Mode::Train, None).unwrap();
        let before = net.predict(&x).unwrap();
        let mut ck = Checkpoint::new();
        net.write_to(&mut ck, "caan/");
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut other = Network::<f32>::new(&spec, 6).unwrap();
        other.read_from(&ck, "caan/").unwrap();
        assert_eq!(other.predict(&x).unwrap(), before);
        assert!(other.read_from(&ck, "adn/").is_err());
    }

    #[test]
    fn init_is_seeded() {
        let spec = build_adn(AdnVariant::BasicCnn, 0.125, 32).unwrap();
        let a = Network::<f32>::new(&spec, 4).unwrap();
        let b = Network::<f32>::new(&spec, 4).unwrap();
        let c = Network::<f32>::new(&spec, 5).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    fn arb_spec() -> impl Strategy<Value = NetworkSpec> {
        prop_oneof![
            (2usize..4, 1usize..5, 0usize..2).prop_map(|(l, b, m)| build_unet(l, b, (1 << l) * (m + 1)).unwrap()),
            (0usize..2, 1u32..3, 4usize..6).prop_map(|(v, s, e)| {
                let v = [CaanVariant::ResnetBased, CaanVariant::MobilenetLike][v];
                build_caan(v, s as f64 / 16.0, 1 << e).unwrap()
            }),
            (0usize..3, 1u32..3, 1usize..5).prop_map(|(v, s, c)| {
                let v = [AdnVariant::BasicCnn, AdnVariant::Resnet18Like, AdnVariant::Vgg16Like][v];
                build_adn(v, s as f64 / 16.0, 32).unwrap().with_input_channels(c)
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn forward_extents_match_shape_table(spec in arb_spec(), seed in any::<u64>()) {
            check_forward_extents(&spec, seed);
        }
    }
}
