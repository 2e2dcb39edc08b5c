//! Datasets, cross-validation and the experiment matrix.
//!
//! [`run_experiment`] trains every configured variant on every fold of a
//! stratified split, for every seed, and reports per-fold F1. Anomaly maps
//! come from a colorizer trained on the negatives of the dataset, or from
//! `.anom.f32` sidecars when the dataset directory already has them.

mod data;
mod models;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomap::{train_colorizer, AnomalyMap, ColorizerConfig, NORMALIZATION};
use crate::colorlab::{io, LabImage};
use crate::error::{bail, Error, Result};
use crate::lea::{LeaModel, Sample, TrainConfig};
use crate::netspec::{build_adn, build_caan_with_outputs, AdnVariant, CaanVariant, NetworkSpec, MAX_ATTENTION_POINT};
use crate::rng;
use crate::tensor::{Graph, Mode, Tensor};

pub use data::{
    f1, load_dataset, positives_for_ratio, stratified_kfold, subsample_to_ratio, Dataset, Resize,
};
pub use models::{Detector, Trained};
pub use synth::{hue_neutralized, synth_dataset, SynthParams, Texture};

#[cfg(test)]
mod tests;

/// One row of the comparison matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// ADN on the RGB image.
    Baseline,
    /// ADN on the normalized anomaly map alone.
    AnomalyMapInput,
    /// ADN on RGB with the map as a fourth channel.
    FourChannelInput,
    /// ADN on `(1 + σ(map)) ⊗ RGB`.
    AttentionedInput,
    /// ADN with `σ(area-mean map)` injected at a point, no CAAN.
    DirectAttention,
    /// Full LEA-Net with the given CAAN.
    Caan(CaanVariant),
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::AnomalyMapInput,
        Variant::FourChannelInput,
        Variant::AttentionedInput,
        Variant::DirectAttention,
        Variant::Caan(CaanVariant::ResnetBased),
        Variant::Caan(CaanVariant::MobilenetLike),
    ];

    /// Whether the variant is evaluated once per attention point.
    pub fn is_point_swept(self) -> bool {
        matches!(self, Variant::DirectAttention | Variant::Caan(_))
    }

    /// Input channels of the ADN.
    pub fn input_channels(self) -> usize {
        match self {
            Variant::AnomalyMapInput => 1,
            Variant::FourChannelInput => 4,
            _ => 3,
        }
    }

    /// The ADN input for an image `x` (`H×W×3`) and its map `m` (`H×W×1`).
    pub fn input(self, x: &Tensor<f32>, m: &Tensor<f32>) -> Tensor<f32> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let (xd, md) = (x.data(), m.data());
        match self {
            Variant::AnomalyMapInput => m.clone(),
            Variant::FourChannelInput => {
                let data = (0..h * w)
                    .flat_map(|i| [xd[3 * i], xd[3 * i + 1], xd[3 * i + 2], md[i]])
                    .collect();
                Tensor::new(&[h, w, 4], data).expect("4 values per pixel")
            }
            Variant::AttentionedInput => {
                let data = (0..h * w)
                    .flat_map(|i| {
                        let a = 1.0 + 1.0 / (1.0 + (-md[i]).exp());
                        [xd[3 * i] * a, xd[3 * i + 1] * a, xd[3 * i + 2] * a]
                    })
                    .collect();
                Tensor::new(&[h, w, 3], data).expect("3 values per pixel")
            }
            _ => x.clone(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::AnomalyMapInput => "anomaly_map_input",
            Variant::FourChannelInput => "four_channel_input",
            Variant::AttentionedInput => "attentioned_input",
            Variant::DirectAttention => "direct_attention",
            Variant::Caan(CaanVariant::ResnetBased) => "caan-resnet",
            Variant::Caan(CaanVariant::MobilenetLike) => "caan-mobilenet",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Ok(match key.as_str() {
            "baseline" => Variant::Baseline,
            "anomaly_map_input" => Variant::AnomalyMapInput,
            "four_channel_input" => Variant::FourChannelInput,
            "attentioned_input" => Variant::AttentionedInput,
            "direct_attention" => Variant::DirectAttention,
            "caan_resnet" | "caan_resnet_based" => Variant::Caan(CaanVariant::ResnetBased),
            "caan_mobilenet" | "caan_mobilenet_like" => Variant::Caan(CaanVariant::MobilenetLike),
            _ => bail!(
                Harness,
                "unknown variant `{s}` (expected one of {})",
                Variant::ALL.map(|v| v.to_string()).join(", ")
            ),
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthParams),
    Directory {
        path: PathBuf,
        #[serde(default)]
        resize: Resize,
    },
}

impl DataSource {
    pub fn load(&self, extent: usize) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(p) => {
                if p.extent as usize != extent {
                    bail!(
                        Harness,
                        "synthetic extent {} differs from the model extent {extent}",
                        p.extent
                    );
                }
                synth_dataset(p)
            }
            DataSource::Directory { path, resize } => load_dataset(path, extent as u32, *resize),
        }
    }
}

/// Everything needed to rerun an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub variants: Vec<Variant>,
    /// Attention points tried by point-swept variants.
    pub points: Vec<u8>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub adn: AdnVariant,
    /// Filter multiplier of ADN and CAAN.
    pub scale: f64,
    pub extent: usize,
    pub train: TrainConfig,
    pub colorizer: ColorizerConfig,
    /// Forces every injected attention map to zero. Wiring check only.
    pub zero_attention: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synthetic(SynthParams::default()),
            variants: vec![Variant::Baseline, Variant::Caan(CaanVariant::ResnetBased)],
            points: (1..=MAX_ATTENTION_POINT).collect(),
            folds: 5,
            seeds: vec![0],
            adn: AdnVariant::BasicCnn,
            scale: 0.125,
            extent: 64,
            train: TrainConfig::default(),
            colorizer: ColorizerConfig::default(),
            zero_attention: false,
        }
    }
}

impl ExperimentConfig {
    pub fn adn_spec(&self, variant: Variant) -> Result<NetworkSpec> {
        Ok(build_adn(self.adn, self.scale, self.extent)?.with_input_channels(variant.input_channels()))
    }

    pub fn caan_spec(&self, variant: CaanVariant) -> Result<NetworkSpec> {
        build_caan_with_outputs(variant, self.scale, self.extent, 1)
    }

    /// The attention points a variant is evaluated at.
    pub fn points_for(&self, variant: Variant) -> Vec<Option<u8>> {
        if variant.is_point_swept() {
            self.points.iter().map(|&p| Some(p)).collect()
        } else {
            vec![None]
        }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            bail!(Harness, "need at least 2 folds, got {}", self.folds);
        }
        if self.seeds.is_empty() {
            bail!(Harness, "need at least one seed");
        }
        if self.variants.is_empty() {
            bail!(Harness, "no variants configured");
        }
        if self.variants.iter().any(|v| v.is_point_swept()) && self.points.is_empty() {
            bail!(Harness, "point-swept variants need at least one attention point");
        }
        if let Some(p) = self.points.iter().find(|&&p| p == 0 || p > MAX_ATTENTION_POINT) {
            bail!(Harness, "attention point {p} is outside 1..{MAX_ATTENTION_POINT}");
        }
        self.train.validate()?;
        if self.colorizer.extent != self.extent {
            bail!(
                Harness,
                "colorizer extent {} differs from the model extent {}",
                self.colorizer.extent,
                self.extent
            );
        }
        for &v in &self.variants {
            let adn = self.adn_spec(v)?;
            for p in self.points_for(v).into_iter().flatten() {
                match v {
                    Variant::Caan(c) => {
                        crate::netspec::validate_attention_alignment(&adn, &self.caan_spec(c)?, p)?;
                    }
                    _ => {
                        if adn.attention_row(p).is_none() {
                            bail!(Harness, "ADN `{}` has no attention point {p}", adn.name);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// F1 of one (variant, point, seed) over all folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: Variant,
    pub point: Option<u8>,
    pub seed: u64,
    pub folds: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1) of `folds`.
    pub std: f64,
    /// Marks the best-point summary of a point-swept variant.
    pub best: bool,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl MetricsRow {
    pub fn new(variant: Variant, point: Option<u8>, seed: u64, folds: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&folds);
        MetricsRow {
            variant,
            point,
            seed,
            folds,
            mean,
            std,
            best: false,
        }
    }
}

/// Image and map tensors for every instance of a dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub x: Vec<Tensor<f32>>,
    pub maps: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

/// `H×W×3` tensor in `[0, 1]`.
pub fn rgb_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("RGB buffer")
}

/// `H×W×1` tensor of the normalized map.
pub fn map_tensor(m: &AnomalyMap) -> Tensor<f32> {
    let data = m.unit_values().iter().map(|&v| v as f32).collect();
    Tensor::new(&[m.height as usize, m.width as usize, 1], data).expect("map buffer")
}

impl Prepared {
    pub fn new(ds: &Dataset, maps: &[AnomalyMap]) -> Self {
        Prepared {
            x: ds.images.iter().map(rgb_tensor).collect(),
            maps: maps.iter().map(map_tensor).collect(),
            labels: ds.labels.clone(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Prepared {
        Prepared {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            maps: idx.iter().map(|&i| self.maps[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples whose `x` is the ADN input of `variant`.
    pub fn samples(&self, variant: Variant, idx: &[usize]) -> Result<Vec<Sample>> {
        idx.iter()
            .map(|&i| Sample::new(variant.input(&self.x[i], &self.maps[i]), self.maps[i].clone(), self.labels[i]))
            .collect()
    }
}

/// Trains a colorizer on the negatives of `ds` and maps every image.
pub fn generate_maps(ds: &Dataset, cfg: &ColorizerConfig) -> Result<Vec<AnomalyMap>> {
    let lab: Vec<LabImage> = ds.images.iter().map(LabImage::from_rgb).collect();
    let normals: Vec<LabImage> = lab.iter().zip(&ds.labels).filter(|(_, &y)| y == 0).map(|(l, _)| l.clone()).collect();
    let (mut colorizer, _) = train_colorizer(&normals, &vec![0; normals.len()], cfg)?;
    colorizer.maps(&lab)
}

/// Maps for one experiment seed: sidecars when present, else a colorizer
/// seeded from `seed`.
pub fn maps_for_seed(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<AnomalyMap>> {
    match &ds.maps {
        Some(m) => Ok(m.clone()),
        None => generate_maps(
            ds,
            &ColorizerConfig {
                seed: rng::derive(seed, "colorizer"),
                ..cfg.colorizer
            },
        ),
    }
}

/// Seed shared by every variant on one fold, so variants differ only in
/// wiring.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_indexed(seed, "fold", fold as u64)
}

/// Trains `variant` on `train` and returns test-set probabilities.
pub fn fit_and_predict(
    cfg: &ExperimentConfig,
    data: &Prepared,
    variant: Variant,
    point: Option<u8>,
    train: &[usize],
    test: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let train_set = data.samples(variant, train)?;
    let test_set = data.samples(variant, test)?;
    let tcfg = TrainConfig { seed, ..cfg.train };
    let mut model = Trained::fit(cfg, variant, point, &train_set, &tcfg, seed)?;
    model.predict(&test_set.iter().collect::<Vec<_>>())
}

/// Runs every (variant, point, fold) of one prepared dataset and seed.
pub fn evaluate(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<Vec<MetricsRow>> {
    let folds = stratified_kfold(&data.labels, cfg.folds, rng::derive(seed, "folds"))?;
    let mut jobs = Vec::new();
    for &v in &cfg.variants {
        for p in cfg.points_for(v) {
            for k in 0..folds.len() {
                jobs.push((v, p, k));
            }
        }
    }
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(v, p, k)| {
            let test = &folds[k];
            let train: Vec<usize> = folds.iter().enumerate().filter(|&(j, _)| j != k).flat_map(|(_, f)| f.clone()).collect();
            let mut train = train;
            train.sort_unstable();
            let preds = fit_and_predict(cfg, data, v, p, &train, test, fold_seed(seed, k))?;
            let labels: Vec<u8> = test.iter().map(|&i| data.labels[i]).collect();
            f1(&preds, &labels, 0.5)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (chunk, &(v, p, _)) in scores.chunks(folds.len()).zip(jobs.iter().step_by(folds.len())) {
        rows.push(MetricsRow::new(v, p, seed, chunk.to_vec()));
    }
    let mut best = Vec::new();
    for &v in cfg.variants.iter().filter(|v| v.is_point_swept()) {
        let top = rows
            .iter()
            .filter(|r| r.variant == v)
            .fold(None::<&MetricsRow>, |acc, r| match acc {
                Some(a) if a.mean > r.mean || (a.mean == r.mean && a.point <= r.point) => Some(a),
                _ => Some(r),
            });
        if let Some(t) = top {
            best.push(MetricsRow { best: true, ..t.clone() });
        }
    }
    rows.extend(best);
    Ok(rows)
}

/// Orders rows by variant, point and seed, with best-point summaries after
/// the point rows of their variant.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        (a.variant, a.best, a.point, a.seed)
            .cmp(&(b.variant, b.best, b.point, b.seed))
    });
}

fn check_class_counts(ds: &Dataset, k: usize) -> Result<()> {
    for label in [1u8, 0] {
        if ds.count(label) < k {
            bail!(
                Harness,
                "class {label} has {} instances, fewer than {k} folds",
                ds.count(label)
            );
        }
    }
    Ok(())
}

/// The full comparison matrix: every variant, point, seed and fold.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let ds = cfg.source.load(cfg.extent)?;
    check_class_counts(&ds, cfg.folds)?;
    if ds.maps.is_none() && ds.count(0) < 2 * cfg.colorizer.batch {
        bail!(
            Harness,
            "no anomaly maps on disk and only {} negatives to train a colorizer on (need {})",
            ds.count(0),
            2 * cfg.colorizer.batch
        );
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let maps = maps_for_seed(&ds, cfg, seed)?;
        rows.extend(evaluate(cfg, &Prepared::new(&ds, &maps), seed)?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Results of one positive ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGroup {
    pub ratio: f64,
    pub positives: usize,
    pub negatives: usize,
    pub rows: Vec<MetricsRow>,
}

/// Reruns the matrix with positives subsampled to each ratio; negatives,
/// and therefore the colorizer, stay fixed.
pub fn imbalance_sweep(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<SweepGroup>> {
    cfg.validate()?;
    if ratios.is_empty() {
        bail!(Harness, "no ratios to sweep");
    }
    let ds = cfg.source.load(cfg.extent)?;
    check_class_counts(&ds, cfg.folds)?;
    for &r in ratios {
        subsample_to_ratio(&ds.labels, r, cfg.folds, 0)?;
    }
    let mut groups: Vec<SweepGroup> = ratios
        .iter()
        .map(|&ratio| SweepGroup {
            ratio,
            positives: positives_for_ratio(ratio, ds.count(0)),
            negatives: ds.count(0),
            rows: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let prepared = Prepared::new(&ds, &maps_for_seed(&ds, cfg, seed)?);
        for (i, g) in groups.iter_mut().enumerate() {
            let keep = subsample_to_ratio(&ds.labels, g.ratio, cfg.folds, rng::derive_indexed(seed, "ratio", i as u64))?;
            g.rows.extend(evaluate(cfg, &prepared.select(&keep), seed)?);
        }
    }
    for g in &mut groups {
        sort_rows(&mut g.rows);
    }
    Ok(groups)
}

/// Per-fold CSV: `variant,point,seed,fold,f1`. Best-point summaries are
/// left out since they repeat a point row.
pub fn fold_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,point,seed,fold,f1\n");
    for r in rows.iter().filter(|r| !r.best) {
        let p = r.point.map(|p| p.to_string()).unwrap_or_default();
        for (k, f) in r.folds.iter().enumerate() {
            out.push_str(&format!("{},{p},{},{k},{f}\n", r.variant, r.seed));
        }
    }
    out
}

/// Pooled F1 over seeds and folds per (variant, point).
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variant: Variant,
    pub point: Option<u8>,
    pub mean: f64,
    pub std: f64,
    /// Set on the best-point line of a point-swept variant.
    pub best: bool,
}

/// Pools fold scores across seeds. Point-swept variants get one extra line
/// for the best point: highest pooled mean, ties to the smaller point.
pub fn summarize(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut keys: Vec<(Variant, Option<u8>)> = rows.iter().filter(|r| !r.best).map(|r| (r.variant, r.point)).collect();
    keys.sort();
    keys.dedup();
    let mut out: Vec<Summary> = Vec::new();
    for (v, p) in keys {
        let folds: Vec<f64> = rows
            .iter()
            .filter(|r| !r.best && r.variant == v && r.point == p)
            .flat_map(|r| r.folds.iter().copied())
            .collect();
        let (mean, std) = mean_std(&folds);
        out.push(Summary {
            variant: v,
            point: p,
            mean,
            std,
            best: false,
        });
    }
    let mut with_best = Vec::new();
    for (i, s) in out.iter().enumerate() {
        with_best.push(s.clone());
        let last_of_variant = out.get(i + 1).is_none_or(|n| n.variant != s.variant);
        if s.variant.is_point_swept() && last_of_variant {
            let best = out
                .iter()
                .filter(|o| o.variant == s.variant)
                .fold(None::<&Summary>, |acc, o| match acc {
                    Some(a) if a.mean >= o.mean => Some(a),
                    _ => Some(o),
                });
            if let Some(b) = best {
                with_best.push(Summary { best: true, ..b.clone() });
            }
        }
    }
    with_best
}

/// Summary CSV: `variant,point,mean_f1,std_f1`; best lines use `best:<p>`.
pub fn summary_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,point,mean_f1,std_f1\n");
    for s in summarize(rows) {
        let p = match (s.best, s.point) {
            (true, Some(p)) => format!("best:{p}"),
            (_, Some(p)) => p.to_string(),
            (_, None) => String::new(),
        };
        out.push_str(&format!("{},{p},{},{}\n", s.variant, s.mean, s.std));
    }
    out
}

/// JSON sidecar with the configuration, library version and map
/// normalization.
pub fn metadata_json(cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<String> {
    let v = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "normalization": NORMALIZATION,
        "config": cfg,
        "extra": extra,
    });
    serde_json::to_string_pretty(&v).map_err(|e| Error::Harness(e.to_string()))
}

/// What [`dump_feature_maps`] wrote and the arrays behind it.
#[derive(Clone, Debug)]
pub struct FeatureDump {
    pub point: u8,
    pub files: Vec<PathBuf>,
    /// `H_p×W_p×1` attention map.
    pub attention: Tensor<f32>,
    /// `H_p×W_p×C_p` ADN features before and after attention.
    pub before: Tensor<f32>,
    pub after: Tensor<f32>,
}

/// Channel mean of an `H×W×C` tensor, accumulated in f64.
pub fn channel_mean(t: &Tensor<f32>) -> Vec<f32> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data().chunks(c).map(|px| (px.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32).collect()
}

/// Writes `p<p>_attention.png`, `p<p>_before.png` and `p<p>_after.png`
/// (channel averages) for one sample, plus raw f32 arrays under `raw/`.
/// Before and after share one intensity scale.
pub fn dump_feature_maps(model: &mut LeaModel, s: &Sample, out_dir: &Path) -> Result<FeatureDump> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let with_batch = |t: &Tensor<f32>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let x = g.constant(with_batch(&s.x)?);
    let m = g.constant(with_batch(&s.x_att)?);
    let f = model.forward(&mut g, &vars, x, m, Mode::Eval)?;
    let drop_batch = |v| {
        let t: &Tensor<f32> = g.value(v);
        t.clone().reshape(&t.shape()[1..])
    };
    let (attention, before, after) = (drop_batch(f.attention)?, drop_batch(f.before)?, drop_batch(f.after)?);
    let (h, w) = (attention.shape()[0] as u32, attention.shape()[1] as u32);
    let (b, a) = (channel_mean(&before), channel_mean(&after));
    let peak = a.iter().chain(&b).fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = |v: &[f32]| -> Vec<f32> { v.iter().map(|x| if peak > 0.0 { x.abs() / peak } else { 0.0 }).collect() };

    let p = model.point();
    let raw = out_dir.join("raw");
    std::fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    let files = vec![
        out_dir.join(format!("p{p}_attention.png")),
        out_dir.join(format!("p{p}_before.png")),
        out_dir.join(format!("p{p}_after.png")),
    ];
    io::write_gray_png(&files[0], &io::unit_to_gray(w, h, attention.data())?)?;
    io::write_gray_png(&files[1], &io::unit_to_gray(w, h, &scale(&b))?)?;
    io::write_gray_png(&files[2], &io::unit_to_gray(w, h, &scale(&a))?)?;
    let c = before.shape()[2] as u32;
    io::write_f32_grid(&raw.join(format!("p{p}_attention.f32")), w, h, attention.data())?;
    io::write_f32_grid(&raw.join(format!("p{p}_before.f32")), w, h, &b)?;
    io::write_f32_grid(&raw.join(format!("p{p}_after.f32")), w, h, &a)?;
    io::write_f32_grid(&raw.join(format!("p{p}_before_features.f32")), w * c, h, before.data())?;
    Ok(FeatureDump {
        point: p,
        files,
        attention,
        before,
        after,
    })
}
