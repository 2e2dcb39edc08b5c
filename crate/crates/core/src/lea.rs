//! Layer-wise external attention.
//!
//! The attention network (CAAN) reads an anomaly map; its features at the
//! active point `p` are averaged over channels and squashed into
//! `M_p = σ(channel_avg(g_p))`. The detection network (ADN) reads the RGB
//! image and has its features at the same point replaced by
//! `f̂_p = (1 + M_p) ⊗ f_p`. Both heads are trained together on
//! `BCE(CAAN) + BCE(ADN)` with one optimizer over both parameter sets, so the
//! detection loss also reaches CAAN through `M_p`.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::netspec::{validate_attention_alignment, NetworkSpec};
use crate::nn::Network;
use crate::rng;
use crate::tensor::{
    Activation, AdamConfig, AdamState, Checkpoint, Graph, Mode, PoolKind, Real, Tensor, Var,
};

#[cfg(test)]
mod tests;

const BCE_CLAMP: f64 = 1e-7;

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×3` image in `[0, 1]`.
    pub x: Tensor<f32>,
    /// `H×W×1` normalized anomaly map.
    pub x_att: Tensor<f32>,
    pub y: u8,
}

impl Sample {
    pub fn new(x: Tensor<f32>, x_att: Tensor<f32>, y: u8) -> Result<Self> {
        let (xs, ms) = (x.shape(), x_att.shape());
        if xs.len() != 3 || ms.len() != 3 || xs[..2] != ms[..2] || ms[2] != 1 {
            bail!(
                Model,
                "sample image {:?} and anomaly map {:?} must be H×W×C and H×W×1 of equal extent",
                xs,
                ms
            );
        }
        if y > 1 {
            bail!(Model, "label must be 0 or 1, got {y}");
        }
        Ok(Sample { x, x_att, y })
    }
}

/// Per-batch or per-epoch loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub attention: f64,
    pub detection: f64,
}

fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Joint loss for a single prediction pair.
pub fn total_loss(y_ad: f64, y_att: f64, y: u8) -> LossBreakdown {
    let y = y as f64;
    let attention = bce_value(y_att, y);
    let detection = bce_value(y_ad, y);
    LossBreakdown {
        total: attention + detection,
        attention,
        detection,
    }
}

/// `σ(channel_avg(features))`, `N×H×W×1`.
pub fn attention_map<T: Real>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let avg = g.pool(features, PoolKind::ChannelAvg, 0)?;
    Ok(g.activate(avg, Activation::Sigmoid))
}

/// `(1 + m) ⊗ f` with `m` broadcast over the channels of `f`.
pub fn apply_attention<T: Real>(g: &mut Graph<T>, f: Var, m: Var) -> Result<Var> {
    let (fs, ms) = (g.value(f).shape(), g.value(m).shape());
    let rank = fs.len();
    if ms.len() != rank || rank < 3 || fs[..rank - 1] != ms[..rank - 1] || ms[rank - 1] != 1 {
        bail!(
            Model,
            "attention map {:?} does not fit features {:?}",
            ms,
            fs
        );
    }
    let one_plus = g.add_scalar(m, T::one());
    g.mul(f, one_plus)
}

/// How the attention map reaches the detection network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    /// `M_p` as computed, with gradients flowing back into CAAN.
    #[default]
    Joint,
    /// `M_p` as computed, but treated as a constant by the detection branch.
    Detached,
    /// `M_p ≡ 0`, which reduces the detection branch to the plain ADN.
    Zero,
}

/// Graph handles produced by [`LeaModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LeaForward {
    /// ADN probabilities, `N×1`.
    pub y_ad: Var,
    /// CAAN probabilities, `N×1`.
    pub y_att: Var,
    /// The map injected into ADN, `N×H_p×W_p×1`.
    pub attention: Var,
    /// ADN features at the point, before and after attention.
    pub before: Var,
    pub after: Var,
}

/// Hyperparameters of [`LeaModel::train`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.adam.lr > 0.0) {
            bail!(
                Model,
                "training needs epochs ≥ 1, batch ≥ 1 and lr > 0 (got {}, {}, {})",
                self.epochs,
                self.batch,
                self.adam.lr
            );
        }
        Ok(())
    }
}

/// Minibatch index lists for one epoch, from a shuffle stream.
pub(crate) fn epoch_batches(n: usize, batch: usize, shuffle: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(shuffle);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_labels(samples: &[&Sample]) -> Result<()> {
    if samples.is_empty() {
        bail!(Model, "training set is empty");
    }
    let pos = samples.iter().filter(|s| s.y == 1).count();
    if pos == 0 || pos == samples.len() {
        bail!(
            Model,
            "training set must contain both labels, got {pos} positive of {}",
            samples.len()
        );
    }
    Ok(())
}

/// Stacks per-sample tensors into one `N×…` batch.
pub(crate) fn stack<T: Real>(items: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let Some(first) = items.first() else {
        bail!(Model, "empty batch");
    };
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            bail!(Model, "batch mixes shapes {:?} and {:?}", first.shape(), t.shape());
        }
        data.extend(t.data().iter().map(|&v| T::cast(v as f64)));
    }
    Tensor::new(&shape, data)
}

/// Paired CAAN and ADN with one active attention point.
#[derive(Clone, Debug)]
pub struct LeaModel<T: Real = f32> {
    caan: Network<T>,
    adn: Network<T>,
    point: u8,
    pub path: AttentionPath,
}

impl<T: Real> LeaModel<T> {
    /// Builds both networks, seeding them from `seed`.
    pub fn new(adn: &NetworkSpec, caan: &NetworkSpec, point: u8, seed: u64) -> Result<Self> {
        Self::from_networks(
            Network::new(adn, rng::derive(seed, "adn"))?,
            Network::new(caan, rng::derive(seed, "caan"))?,
            point,
        )
    }

    pub fn from_networks(adn: Network<T>, caan: Network<T>, point: u8) -> Result<Self> {
        validate_attention_alignment(adn.spec(), caan.spec(), point)?;
        for (name, net) in [("ADN", &adn), ("CAAN", &caan)] {
            let out = net.shapes().output();
            if (out.height, out.width, out.channels) != (1, 1, 1) {
                bail!(
                    Model,
                    "{name} `{}` must end in a single probability, got {out}",
                    net.spec().name
                );
            }
        }
        let (xa, xc) = (adn.input_extent(), caan.input_extent());
        if (xa.height, xa.width) != (xc.height, xc.width) || xc.channels != 1 {
            bail!(
                Model,
                "ADN input {xa} and CAAN input {xc} must share extents, CAAN with one channel"
            );
        }
        Ok(LeaModel {
            caan,
            adn,
            point,
            path: AttentionPath::Joint,
        })
    }

    pub fn point(&self) -> u8 {
        self.point
    }

    pub fn caan(&self) -> &Network<T> {
        &self.caan
    }

    pub fn adn(&self) -> &Network<T> {
        &self.adn
    }

    pub fn caan_mut(&mut self) -> &mut Network<T> {
        &mut self.caan
    }

    pub fn adn_mut(&mut self) -> &mut Network<T> {
        &mut self.adn
    }

    /// Binds ADN parameters as ids `0..a` and CAAN parameters as `a..a+c`.
    pub fn bind(&self, g: &mut Graph<T>) -> (Vec<Var>, Vec<Var>) {
        let adn = self.adn.bind(g, 0);
        let caan = self.caan.bind(g, adn.len());
        (adn, caan)
    }

    /// Runs CAAN on `x_att`, derives `M_p`, and runs ADN on `x` with the
    /// attended features substituted at point `p`.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        vars: &(Vec<Var>, Vec<Var>),
        x: Var,
        x_att: Var,
        mode: Mode,
    ) -> Result<LeaForward> {
        let point = self.point;
        let mut tap = None;
        let mut caan_hook = |_: &mut Graph<T>, p: u8, y: Var| -> Result<Var> {
            if p == point {
                tap = Some(y);
            }
            Ok(y)
        };
        let caan_out = self.caan.forward(g, &vars.1, x_att, mode, Some(&mut caan_hook))?;
        let Some(features) = tap else {
            bail!(Model, "CAAN never reached attention point {point}");
        };
        let m = attention_map(g, features)?;
        let injected = match self.path {
            AttentionPath::Joint => m,
            AttentionPath::Detached => {
                let v = g.value(m).clone();
                g.constant(v)
            }
            AttentionPath::Zero => {
                let shape = g.value(m).shape().to_vec();
                g.constant(Tensor::zeros(&shape))
            }
        };
        let mut taps = None;
        let mut adn_hook = |g: &mut Graph<T>, p: u8, y: Var| -> Result<Var> {
            if p != point {
                return Ok(y);
            }
            let out = apply_attention(g, y, injected)?;
            taps = Some((y, out));
            Ok(out)
        };
        let adn_out = self.adn.forward(g, &vars.0, x, mode, Some(&mut adn_hook))?;
        let Some((before, after)) = taps else {
            bail!(Model, "ADN never reached attention point {point}");
        };
        Ok(LeaForward {
            y_ad: adn_out.output,
            y_att: caan_out.output,
            attention: injected,
            before,
            after,
        })
    }

    fn batch_inputs(&self, g: &mut Graph<T>, batch: &[&Sample]) -> Result<(Var, Var)> {
        let x = stack::<T>(&batch.iter().map(|s| &s.x).collect::<Vec<_>>())?;
        let m = stack::<T>(&batch.iter().map(|s| &s.x_att).collect::<Vec<_>>())?;
        Ok((g.constant(x), g.constant(m)))
    }

    /// Training-mode loss of one batch, without gradients.
    pub fn batch_loss(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let (x, m) = self.batch_inputs(&mut g, batch)?;
        let out = self.forward(&mut g, &vars, x, m, Mode::Train)?;
        let labels: Vec<f64> = batch.iter().map(|s| s.y as f64).collect();
        let l_att = g.bce(out.y_att, &labels)?;
        let l_ad = g.bce(out.y_ad, &labels)?;
        let attention = g.value(l_att).data()[0].as_f64();
        let detection = g.value(l_ad).data()[0].as_f64();
        Ok(LossBreakdown {
            total: attention + detection,
            attention,
            detection,
        })
    }

    /// Loss and gradients for one batch in training mode. Gradients are
    /// returned per network, in parameter order.
    pub fn gradients(&mut self, batch: &[&Sample]) -> Result<(LossBreakdown, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let (x, m) = self.batch_inputs(&mut g, batch)?;
        let out = self.forward(&mut g, &vars, x, m, Mode::Train)?;
        let labels: Vec<f64> = batch.iter().map(|s| s.y as f64).collect();
        let l_att = g.bce(out.y_att, &labels)?;
        let l_ad = g.bce(out.y_ad, &labels)?;
        let total = g.add(l_att, l_ad)?;
        let grads = g.backward(total)?;
        let collect = |vars: &[Var], net: &Network<T>| -> Vec<Tensor<T>> {
            vars.iter()
                .zip(net.params())
                .map(|(v, p)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect()
        };
        let adn = collect(&vars.0, &self.adn);
        let caan = collect(&vars.1, &self.caan);
        let attention = g.value(l_att).data()[0].as_f64();
        let detection = g.value(l_ad).data()[0].as_f64();
        Ok((
            LossBreakdown {
                total: attention + detection,
                attention,
                detection,
            },
            adn,
            caan,
        ))
    }

    /// Joint training. Returns the mean loss terms of every epoch.
    pub fn train(&mut self, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
        cfg.validate()?;
        check_labels(&data.iter().collect::<Vec<_>>())?;
        let mut adam = AdamState::new(cfg.adam, &[self.adn.params(), self.caan.params()].concat());
        let mut shuffle = rng::stream(cfg.seed, "shuffle");
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut sum = LossBreakdown::default();
            for idx in epoch_batches(data.len(), cfg.batch, &mut shuffle) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
                let (loss, ga, gc) = self.gradients(&batch)?;
                let w = batch.len() as f64;
                sum.attention += loss.attention * w;
                sum.detection += loss.detection * w;
                let mut params: Vec<&mut Tensor<T>> =
                    self.adn.params_mut().iter_mut().chain(self.caan.params_mut()).collect();
                let grads: Vec<Option<&Tensor<T>>> = ga.iter().chain(&gc).map(Some).collect();
                adam.step_refs(&mut params, &grads)?;
            }
            let n = data.len() as f64;
            let (attention, detection) = (sum.attention / n, sum.detection / n);
            history.push(LossBreakdown {
                total: attention + detection,
                attention,
                detection,
            });
        }
        Ok(history)
    }

    /// Evaluation-mode probabilities `(y_ad, y_att)` per sample.
    pub fn predict(&mut self, data: &[&Sample]) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(16) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g);
            let (x, m) = self.batch_inputs(&mut g, chunk)?;
            let f = self.forward(&mut g, &vars, x, m, Mode::Eval)?;
            let ad = g.value(f.y_ad).data();
            let att = g.value(f.y_att).data();
            out.extend(ad.iter().zip(att).map(|(a, b)| (a.as_f64(), b.as_f64())));
        }
        Ok(out)
    }
}

impl LeaModel<f32> {
    /// Parameters under `caan/` and `adn/`, plus the point, both spec texts
    /// and the anomaly-map normalization as metadata.
    pub fn to_checkpoint(&self, normalization: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("point", self.point.to_string());
        ck.push_meta("caan_spec", self.caan.spec().to_text());
        ck.push_meta("adn_spec", self.adn.spec().to_text());
        ck.push_meta("normalization", normalization);
        self.caan.write_to(&mut ck, "caan/");
        self.adn.write_to(&mut ck, "adn/");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| -> Result<&str> {
            match ck.meta(key) {
                Some(v) => Ok(v),
                None => bail!(Checkpoint, "missing metadata `{key}`"),
            }
        };
        let point: u8 = meta("point")?
            .parse()
            .map_err(|_| crate::Error::Checkpoint(format!("bad attention point `{}`", meta("point").unwrap_or(""))))?;
        let caan_spec = NetworkSpec::from_text(meta("caan_spec")?)?;
        let adn_spec = NetworkSpec::from_text(meta("adn_spec")?)?;
        let mut model = LeaModel::new(&adn_spec, &caan_spec, point, 0)?;
        model.caan.read_from(ck, "caan/")?;
        model.adn.read_from(ck, "adn/")?;
        Ok(model)
    }
}
