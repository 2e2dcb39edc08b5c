use crate::anomap::NORMALIZATION;
use crate::error::{bail, Error, Result};
use crate::lea::{apply_attention, check_labels, epoch_batches, stack, LeaModel, LossBreakdown, Sample, TrainConfig};
use crate::netspec::NetworkSpec;
use crate::nn::Network;
use crate::rng;
use crate::tensor::{AdamState, Checkpoint, Graph, Mode, Tensor, Var};

use super::{ExperimentConfig, Variant};

/// ADN alone, optionally with a fixed attention map derived from the
/// anomaly map injected at one point.
#[derive(Clone, Debug)]
pub struct Detector {
    adn: Network<f32>,
    /// Point of direct injection; `None` for a plain ADN.
    direct: Option<u8>,
    /// Replaces the injected map with zeros.
    pub zero_attention: bool,
}

/// Block means of an `H×W×1` map over an `h×w` grid, then `σ`.
pub(crate) fn direct_map(m: &Tensor<f32>, h: usize, w: usize) -> Vec<f32> {
    let (mh, mw) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (y0, y1) = (i * mh / h, ((i + 1) * mh / h).max(i * mh / h + 1));
        for j in 0..w {
            let (x0, x1) = (j * mw / w, ((j + 1) * mw / w).max(j * mw / w + 1));
            let mut sum = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += d[y * mw + x] as f64;
                }
            }
            let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
            out.push((1.0 / (1.0 + (-mean).exp())) as f32);
        }
    }
    out
}

impl Detector {
    /// Seeds the ADN exactly as [`LeaModel::new`] does, so a plain detector
    /// and a LEA model with zero attention start from identical weights.
    pub fn new(adn: &NetworkSpec, direct: Option<u8>, seed: u64) -> Result<Self> {
        Self::from_network(Network::new(adn, rng::derive(seed, "adn"))?, direct)
    }

    pub fn from_network(adn: Network<f32>, direct: Option<u8>) -> Result<Self> {
        if let Some(p) = direct {
            if adn.spec().attention_row(p).is_none() {
                bail!(Model, "ADN `{}` has no attention point {p}", adn.spec().name);
            }
        }
        let out = adn.shapes().output();
        if (out.height, out.width, out.channels) != (1, 1, 1) {
            bail!(Model, "ADN `{}` must end in a single probability, got {out}", adn.spec().name);
        }
        Ok(Detector {
            adn,
            direct,
            zero_attention: false,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.adn
    }

    pub fn direct_point(&self) -> Option<u8> {
        self.direct
    }

    fn forward(&mut self, g: &mut Graph<f32>, vars: &[Var], batch: &[&Sample], mode: Mode) -> Result<Var> {
        let x = g.constant(stack::<f32>(&batch.iter().map(|s| &s.x).collect::<Vec<_>>())?);
        let Some(p) = self.direct else {
            return Ok(self.adn.forward(g, vars, x, mode, None)?.output);
        };
        let row = self.adn.spec().attention_row(p).expect("checked at construction");
        let e = self.adn.shapes().layers[row];
        let mut data = Vec::with_capacity(batch.len() * e.height * e.width);
        for s in batch {
            if self.zero_attention {
                data.extend(std::iter::repeat_n(0.0, e.height * e.width));
            } else {
                data.extend(direct_map(&s.x_att, e.height, e.width));
            }
        }
        let m = g.constant(Tensor::new(&[batch.len(), e.height, e.width, 1], data)?);
        let mut hook = |g: &mut Graph<f32>, q: u8, y: Var| if q == p { apply_attention(g, y, m) } else { Ok(y) };
        Ok(self.adn.forward(g, vars, x, mode, Some(&mut hook))?.output)
    }

    /// Same batching, shuffle stream and optimizer as [`LeaModel::train`].
    /// Returns mean detection loss per epoch.
    pub fn train(&mut self, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
        cfg.validate()?;
        check_labels(&data.iter().collect::<Vec<_>>())?;
        let mut adam = AdamState::new(cfg.adam, self.adn.params());
        let mut shuffle = rng::stream(cfg.seed, "shuffle");
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut sum = 0.0;
            for idx in epoch_batches(data.len(), cfg.batch, &mut shuffle) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
                let mut g = Graph::new();
                let vars = self.adn.bind(&mut g, 0);
                let y = self.forward(&mut g, &vars, &batch, Mode::Train)?;
                let labels: Vec<f64> = batch.iter().map(|s| s.y as f64).collect();
                let loss = g.bce(y, &labels)?;
                sum += g.value(loss).data()[0] as f64 * batch.len() as f64;
                let grads = g.backward(loss)?;
                let gs: Vec<Option<&Tensor<f32>>> = vars.iter().map(|v| grads.wrt(*v)).collect();
                let mut params: Vec<&mut Tensor<f32>> = self.adn.params_mut().iter_mut().collect();
                adam.step_refs(&mut params, &gs)?;
            }
            let detection = sum / data.len() as f64;
            history.push(LossBreakdown {
                total: detection,
                attention: 0.0,
                detection,
            });
        }
        Ok(history)
    }

    /// Evaluation-mode probabilities.
    pub fn predict(&mut self, data: &[&Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(16) {
            let mut g = Graph::new();
            let vars = self.adn.bind(&mut g, 0);
            let y = self.forward(&mut g, &vars, chunk, Mode::Eval)?;
            out.extend(g.value(y).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

/// A trained model of any variant.
#[derive(Clone, Debug)]
pub enum Trained {
    Detector { variant: Variant, model: Detector },
    Lea { variant: Variant, model: LeaModel },
}

impl Trained {
    /// An untrained model of `variant`, seeded from `seed`.
    pub fn new(cfg: &ExperimentConfig, variant: Variant, point: Option<u8>, seed: u64) -> Result<Self> {
        let adn = cfg.adn_spec(variant)?;
        let need_point = || match point {
            Some(p) => Ok(p),
            None => bail!(Harness, "variant `{variant}` needs an attention point"),
        };
        Ok(match variant {
            Variant::Caan(c) => {
                let mut model = LeaModel::new(&adn, &cfg.caan_spec(c)?, need_point()?, seed)?;
                if cfg.zero_attention {
                    model.path = crate::lea::AttentionPath::Zero;
                }
                Trained::Lea { variant, model }
            }
            Variant::DirectAttention => {
                let mut model = Detector::new(&adn, Some(need_point()?), seed)?;
                model.zero_attention = cfg.zero_attention;
                Trained::Detector { variant, model }
            }
            _ => Trained::Detector {
                variant,
                model: Detector::new(&adn, None, seed)?,
            },
        })
    }

    /// Builds and trains in one step.
    pub fn fit(
        cfg: &ExperimentConfig,
        variant: Variant,
        point: Option<u8>,
        data: &[Sample],
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut m = Self::new(cfg, variant, point, seed)?;
        m.train(data, train)?;
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        match self {
            Trained::Detector { variant, .. } | Trained::Lea { variant, .. } => *variant,
        }
    }

    /// Input height (and width) of the detection network.
    pub fn extent(&self) -> usize {
        match self {
            Trained::Detector { model, .. } => model.adn.input_extent().height,
            Trained::Lea { model, .. } => model.adn().input_extent().height,
        }
    }

    pub fn point(&self) -> Option<u8> {
        match self {
            Trained::Detector { model, .. } => model.direct_point(),
            Trained::Lea { model, .. } => Some(model.point()),
        }
    }

    pub fn train(&mut self, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
        match self {
            Trained::Detector { model, .. } => model.train(data, cfg),
            Trained::Lea { model, .. } => model.train(data, cfg),
        }
    }

    /// Detection probabilities.
    pub fn predict(&mut self, data: &[&Sample]) -> Result<Vec<f64>> {
        match self {
            Trained::Detector { model, .. } => model.predict(data),
            Trained::Lea { model, .. } => Ok(model.predict(data)?.into_iter().map(|(ad, _)| ad).collect()),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = match self {
            Trained::Lea { model, .. } => model.to_checkpoint(NORMALIZATION),
            Trained::Detector { model, .. } => {
                let mut ck = Checkpoint::new();
                if let Some(p) = model.direct {
                    ck.push_meta("point", p.to_string());
                }
                ck.push_meta("adn_spec", model.adn.spec().to_text());
                ck.push_meta("normalization", NORMALIZATION);
                model.adn.write_to(&mut ck, "adn/");
                ck
            }
        };
        ck.push_meta("variant", self.variant().to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Some(v) = ck.meta("variant") else {
            bail!(Checkpoint, "missing metadata `variant`");
        };
        let variant: Variant = v.parse()?;
        if let Variant::Caan(_) = variant {
            return Ok(Trained::Lea {
                variant,
                model: LeaModel::from_checkpoint(ck)?,
            });
        }
        let Some(spec) = ck.meta("adn_spec") else {
            bail!(Checkpoint, "missing metadata `adn_spec`");
        };
        let point = ck
            .meta("point")
            .map(|p| p.parse::<u8>().map_err(|_| Error::Checkpoint(format!("bad attention point `{p}`"))))
            .transpose()?;
        let mut adn = Network::new(&NetworkSpec::from_text(spec)?, 0)?;
        adn.read_from(ck, "adn/")?;
        Ok(Trained::Detector {
            variant,
            model: Detector::from_network(adn, point)?,
        })
    }
}
