//! Colorization-based anomaly maps.
//!
//! A U-Net learns to predict chroma from lightness on normal images only.
//! Recoloring a test image keeps its L channel and replaces a/b with the
//! prediction; the per-pixel CIEDE2000 distance to the original is the map.
//! Colors the network never saw on normals come back wrong and light up.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::colorlab::{ciede2000, fancy_pca, io, LabImage, LabPixel, Provenance};
use crate::error::{bail, Result};
use crate::netspec::build_unet;
use crate::nn::Network;
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Checkpoint, Graph, Mode, Tensor};


/// Raw L values of an image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Luminance {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

/// Raw (a, b) values of an image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Chroma {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f64; 2]>,
}

impl Luminance {
    /// `L / 100`, the network input.
    pub fn normalized(&self) -> Vec<f32> {
        self.values.iter().map(|&l| (l / 100.0) as f32).collect()
    }
}

impl Chroma {
    /// `(a + 128) / 255` and `(b + 128) / 255`, interleaved.
    pub fn normalized(&self) -> Vec<f32> {
        self.values
            .iter()
            .flat_map(|ab| ab.map(|v| ((v + 128.0) / 255.0) as f32))
            .collect()
    }

    /// Inverse of [`Chroma::normalized`].
    pub fn from_normalized(width: u32, height: u32, values: &[f32]) -> Result<Self> {
        if values.len() != 2 * (width * height) as usize {
            bail!(
                AnomalyMap,
                "expected {} chroma values for {width}×{height}, got {}",
                2 * width * height,
                values.len()
            );
        }
        let values = values
            .chunks_exact(2)
            .map(|c| [c[0] as f64 * 255.0 - 128.0, c[1] as f64 * 255.0 - 128.0])
            .collect();
        Ok(Chroma { width, height, values })
    }
}

pub fn split_luminance(img: &LabImage) -> (Luminance, Chroma) {
    let (width, height) = (img.width(), img.height());
    let l = img.pixels().iter().map(|p| p.l).collect();
    let ab = img.pixels().iter().map(|p| [p.a, p.b]).collect();
    (
        Luminance {
            width,
            height,
            values: l,
        },
        Chroma {
            width,
            height,
            values: ab,
        },
    )
}

pub fn recombine(l: &Luminance, ab: &Chroma, provenance: Provenance) -> Result<LabImage> {
    if (l.width, l.height) != (ab.width, ab.height) {
        bail!(
            AnomalyMap,
            "luminance is {}×{} but chroma is {}×{}",
            l.width,
            l.height,
            ab.width,
            ab.height
        );
    }
    let pixels = l
        .values
        .iter()
        .zip(&ab.values)
        .map(|(&l, &[a, b])| LabPixel::new(l, a, b))
        .collect();
    LabImage::new(l.width, l.height, pixels, provenance)
}

/// Per-pixel ΔE00 values with an optional `[0, 1]` twin.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    pub normalized: Option<Vec<f64>>,
}

impl AnomalyMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// The normalized twin, computed on the fly when absent.
    pub fn unit_values(&self) -> Vec<f64> {
        match &self.normalized {
            Some(v) => v.clone(),
            None => self.values.iter().map(|&d| normalize_value(d)).collect(),
        }
    }
}

pub fn anomaly_map(original: &LabImage, recolored: &LabImage) -> Result<AnomalyMap> {
    if (original.width(), original.height()) != (recolored.width(), recolored.height()) {
        bail!(
            AnomalyMap,
            "original is {}×{} but recolored is {}×{}",
            original.width(),
            original.height(),
            recolored.width(),
            recolored.height()
        );
    }
    let values = original
        .pixels()
        .iter()
        .zip(recolored.pixels())
        .map(|(&p, &q)| ciede2000(p, q))
        .collect();
    Ok(AnomalyMap {
        width: original.width(),
        height: original.height(),
        values,
        normalized: None,
    })
}

/// Name of the normalization recorded in experiment metadata.
pub const NORMALIZATION: &str = "min(delta_e / 100, 1)";

fn normalize_value(d: f64) -> f64 {
    (d / 100.0).min(1.0)
}

pub fn normalize_map(m: &AnomalyMap) -> AnomalyMap {
    AnomalyMap {
        normalized: Some(m.values.iter().map(|&d| normalize_value(d)).collect()),
        ..m.clone()
    }
}

/// `<stem>.anom.png` and `<stem>.anom.f32` inside `dir`.
pub fn map_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.anom.png")), dir.join(format!("{stem}.anom.f32")))
}

/// Writes the 8-bit preview of the normalized map and the raw ΔE sidecar.
pub fn write_map(dir: &Path, stem: &str, m: &AnomalyMap) -> Result<()> {
    let (png, raw) = map_paths(dir, stem);
    let unit: Vec<f32> = m.unit_values().iter().map(|&v| v as f32).collect();
    io::write_gray_png(&png, &io::unit_to_gray(m.width, m.height, &unit)?)?;
    let values: Vec<f32> = m.values.iter().map(|&v| v as f32).collect();
    io::write_f32_grid(&raw, m.width, m.height, &values)
}

/// Reads a `.anom.f32` sidecar back, with its normalized twin.
pub fn read_map(path: &Path) -> Result<AnomalyMap> {
    let (width, height, values) = io::read_f32_grid(path)?;
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        bail!(AnomalyMap, "{}: invalid ΔE value {v}", path.display());
    }
    Ok(normalize_map(&AnomalyMap {
        width,
        height,
        values: values.into_iter().map(f64::from).collect(),
        normalized: None,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorizerConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub extent: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub sigma_alpha: f64,
    pub seed: u64,
}

impl Default for ColorizerConfig {
    fn default() -> Self {
        ColorizerConfig {
            levels: 4,
            base_filters: 8,
            extent: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 30,
            batch: 16,
            patience: 20,
            validation_fraction: 0.1,
            sigma_alpha: 0.1,
            seed: 0,
        }
    }
}

impl ColorizerConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            bail!(
                AnomalyMap,
                "colorizer needs epochs ≥ 1, batch ≥ 1 and lr > 0 (got {}, {}, {})",
                self.epochs,
                self.batch,
                self.lr
            );
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bail!(
                AnomalyMap,
                "validation fraction must be in [0, 1), got {}",
                self.validation_fraction
            );
        }
        if !(self.sigma_alpha >= 0.0) {
            bail!(AnomalyMap, "sigma_alpha must be ≥ 0, got {}", self.sigma_alpha);
        }
        Ok(())
    }
}

/// Per-epoch mean losses. `validation` is empty without a held-out slice.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorizerHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// A trained U-Net that predicts normalized chroma from `L / 100`.
#[derive(Clone, Debug)]
pub struct Colorizer {
    net: Network<f32>,
    config: ColorizerConfig,
}

fn stack(images: &[&LabImage], f: impl Fn(&LabImage) -> Vec<f32>, channels: usize) -> Tensor<f32> {
    let (w, h) = (images[0].width() as usize, images[0].height() as usize);
    let data: Vec<f32> = images.iter().flat_map(|img| f(img)).collect();
    Tensor::new(&[images.len(), h, w, channels], data).expect("stacked images share extents")
}

fn luminance_of(img: &LabImage) -> Vec<f32> {
    split_luminance(img).0.normalized()
}

fn chroma_of(img: &LabImage) -> Vec<f32> {
    split_luminance(img).1.normalized()
}

impl Colorizer {
    /// An untrained colorizer with seeded weights and identity running
    /// statistics.
    pub fn new(config: ColorizerConfig) -> Result<Self> {
        config.validate()?;
        let spec = build_unet(config.levels, config.base_filters, config.extent)?;
        let mut net = Network::new(&spec, rng::derive(config.seed, "colorizer"))?;
        net.init_running_stats();
        Ok(Colorizer { net, config })
    }

    pub fn config(&self) -> &ColorizerConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    fn check_extent(&self, img: &LabImage) -> Result<()> {
        let e = self.config.extent as u32;
        if (img.width(), img.height()) != (e, e) {
            bail!(
                AnomalyMap,
                "colorizer expects {e}×{e} images, got {}×{}",
                img.width(),
                img.height()
            );
        }
        Ok(())
    }

    fn batch_loss(&mut self, batch: &[&LabImage], mode: Mode, adam: Option<&mut AdamState>) -> Result<f64> {
        let x = stack(batch, luminance_of, 1);
        let target = stack(batch, chroma_of, 2);
        let target: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, 0);
        let xv = g.constant(x);
        let out = self.net.forward(&mut g, &vars, xv, mode, None)?;
        let loss = g.mae(out.output, &target)?;
        let value = g.value(loss).data()[0] as f64;
        if let Some(adam) = adam {
            let grads = g.backward(loss)?;
            let gs: Vec<Option<&Tensor<f32>>> = (0..vars.len()).map(|i| grads.param(i)).collect();
            adam.step(self.net.params_mut(), &gs)?;
        }
        Ok(value)
    }

    /// Recolors `img` from its lightness. L is copied bit for bit.
    pub fn colorize(&mut self, img: &LabImage) -> Result<LabImage> {
        Ok(self.colorize_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn colorize_batch(&mut self, images: &[LabImage]) -> Result<Vec<LabImage>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch.max(1)) {
            for img in chunk {
                self.check_extent(img)?;
            }
            let refs: Vec<&LabImage> = chunk.iter().collect();
            let pred = self.net.predict(&stack(&refs, luminance_of, 1))?;
            let per = 2 * (self.config.extent * self.config.extent);
            for (img, ab) in chunk.iter().zip(pred.data().chunks_exact(per)) {
                let (l, _) = split_luminance(img);
                let ab = Chroma::from_normalized(img.width(), img.height(), ab)?;
                out.push(recombine(&l, &ab, Provenance::Recolored)?);
            }
        }
        Ok(out)
    }

    /// Normalized anomaly map of `img` against its own recoloring.
    pub fn map(&mut self, img: &LabImage) -> Result<AnomalyMap> {
        let rec = self.colorize(img)?;
        Ok(normalize_map(&anomaly_map(img, &rec)?))
    }

    pub fn maps(&mut self, images: &[LabImage]) -> Result<Vec<AnomalyMap>> {
        let recs = self.colorize_batch(images)?;
        images
            .iter()
            .zip(&recs)
            .map(|(a, b)| anomaly_map(a, b).map(|m| normalize_map(&m)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_meta(
            "colorizer_config",
            serde_json::to_string(&self.config).map_err(|e| crate::Error::AnomalyMap(e.to_string()))?,
        );
        ck.push_meta("spec", self.net.spec().to_text());
        self.net.write_to(&mut ck, "colorizer/");
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Some(cfg) = ck.meta("colorizer_config") else {
            bail!(AnomalyMap, "checkpoint has no colorizer configuration");
        };
        let config: ColorizerConfig =
            serde_json::from_str(cfg).map_err(|e| crate::Error::AnomalyMap(format!("bad colorizer configuration: {e}")))?;
        let mut c = Colorizer::new(config)?;
        c.net.read_from(ck, "colorizer/")?;
        Ok(c)
    }
}

/// Trains a colorizer on normal images. `labels` must all be 0.
///
/// A seeded shuffle holds out `validation_fraction` of the images before any
/// augmentation. Training images get a fresh Fancy PCA draw every epoch.
/// Training stops after `patience` epochs without a validation improvement
/// and the best weights are kept.
pub fn train_colorizer(
    normals: &[LabImage],
    labels: &[u8],
    config: &ColorizerConfig,
) -> Result<(Colorizer, ColorizerHistory)> {
    config.validate()?;
    if normals.is_empty() {
        bail!(AnomalyMap, "colorizer training set is empty");
    }
    if labels.len() != normals.len() {
        bail!(
            AnomalyMap,
            "{} images but {} labels",
            normals.len(),
            labels.len()
        );
    }
    if let Some(i) = labels.iter().position(|&y| y != 0) {
        bail!(
            AnomalyMap,
            "colorizer trains on normal images only; image {i} is labeled {}",
            labels[i]
        );
    }
    if normals.len() < 2 * config.batch {
        bail!(
            AnomalyMap,
            "colorizer needs at least {} normal images (2 × batch), got {}",
            2 * config.batch,
            normals.len()
        );
    }
    let mut c = Colorizer::new(*config)?;
    for img in normals {
        c.check_extent(img)?;
    }

    let mut order: Vec<usize> = (0..normals.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, "colorizer_split"));
    let n_val = (normals.len() as f64 * config.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&LabImage> = val_idx.iter().map(|&i| &normals[i]).collect();
    let train_rgb: Vec<_> = train_idx.iter().map(|&i| normals[i].to_rgb()).collect();

    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            ..AdamConfig::default()
        },
        c.net.params(),
    );
    let mut history = ColorizerHistory::default();
    let mut best: Option<(f64, Network<f32>)> = None;
    let mut since_best = 0;
    let mut shuffle = rng::stream(config.seed, "colorizer_shuffle");
    for epoch in 0..config.epochs {
        let augmented: Vec<LabImage> = train_rgb
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let seed = rng::derive_indexed(config.seed, "colorizer_pca", (epoch * train_rgb.len() + i) as u64);
                fancy_pca(img, config.sigma_alpha, seed).map(|a| LabImage::from_rgb(&a))
            })
            .collect::<Result<_>>()?;
        let mut idx: Vec<usize> = (0..augmented.len()).collect();
        idx.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in idx.chunks(config.batch) {
            let batch: Vec<&LabImage> = chunk.iter().map(|&i| &augmented[i]).collect();
            total += c.batch_loss(&batch, Mode::Train, Some(&mut adam))? * chunk.len() as f64;
        }
        history.train.push(total / idx.len() as f64);

        let score = if val.is_empty() {
            *history.train.last().expect("pushed above")
        } else {
            let mut v = 0.0;
            for chunk in val.chunks(config.batch) {
                v += c.batch_loss(chunk, Mode::Eval, None)? * chunk.len() as f64;
            }
            let v = v / val.len() as f64;
            history.validation.push(v);
            v
        };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, c.net.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, net)) = best {
        c.net = net;
    }
    Ok((c, history))
}
