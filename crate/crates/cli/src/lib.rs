//! The `leanet` command line: synthesize data, train the colorizer, write
//! anomaly maps, train and evaluate detectors, run cross-validated sweeps and
//! dump attention visualizations.
//!
//! Exit codes: 0 on success, 1 when a pipeline stage fails (the message names
//! the module), 2 on a usage error.

mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use leanet::anomap::{train_colorizer, write_map, AnomalyMap, Colorizer, ColorizerConfig};
use leanet::colorlab::LabImage;
use leanet::harness::{
    f1, imbalance_sweep, load_dataset, metadata_json, run_experiment, synth_dataset, DataSource, Dataset,
    ExperimentConfig, Prepared, Resize, SynthParams, Texture, Trained, Variant,
};
use leanet::lea::{Sample, TrainConfig};
use leanet::netspec::AdnVariant;
use leanet::rng;
use leanet::tensor::{read_checkpoint, write_checkpoint};
use leanet::{Error, Result};

pub use report::{emit_report, emit_sweep_report, sweep_svg, text_table};

/// Ratio grid used by `sweep --ratios` when no value is given.
pub const DEFAULT_RATIOS: [f64; 4] = [0.33, 0.25, 0.124, 0.06];

#[derive(Parser, Debug)]
#[command(name = "leanet", version, about = "Layer-wise external attention for color anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment configuration; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed, or a comma-separated list of seeds for `sweep`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "LEANET_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Image side length in pixels.
    #[arg(long)]
    extent: Option<usize>,
    /// Filter multiplier of the detection and attention networks.
    #[arg(long)]
    scale: Option<f64>,
    /// Detection network: basic_cnn, resnet18_like or vgg16_like.
    #[arg(long, value_parser = parse_with::<AdnVariant>)]
    adn: Option<AdnVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset directory with `positive/` and `negative/` subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Resampling for images whose size differs from the extent.
    #[arg(long, value_parser = parse_resize)]
    resize: Option<Resize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic color-anomaly dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of anomalous images.
        #[arg(long)]
        pos: Option<usize>,
        /// Number of normal images.
        #[arg(long)]
        neg: Option<usize>,
        /// Hue offset of anomalous patches in degrees.
        #[arg(long)]
        hue_shift: Option<f64>,
        /// Lightness texture: cells or waves.
        #[arg(long, value_parser = parse_texture)]
        texture: Option<Texture>,
        #[arg(long)]
        extent: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the colorizer on the normal images of a dataset.
    TrainColorizer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// U-Net depth.
        #[arg(long)]
        levels: Option<usize>,
        /// Epochs without validation improvement before stopping.
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        extent: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write `.anom.png` and `.anom.f32` next to every dataset image.
    GenMaps {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train-colorizer`.
        #[arg(long)]
        colorizer: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant on a whole dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_with::<Variant>)]
        variant: Variant,
        /// Attention point for direct_attention and CAAN variants.
        #[arg(long)]
        point: Option<u8>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained model on a dataset.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate variants, optionally over positive ratios.
    Sweep {
        /// Dataset directory; the configured synthetic set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_resize)]
        resize: Option<Resize>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', value_parser = parse_with::<Variant>)]
        variants: Vec<Variant>,
        /// Comma-separated attention points.
        #[arg(long, value_delimiter = ',')]
        points: Vec<u8>,
        #[arg(long)]
        folds: Option<usize>,
        /// Positive ratios to sweep; bare `--ratios` uses 0.33,0.25,0.124,0.06.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        ratios: Option<Vec<f64>>,
        /// Inject all-zero attention maps (wiring check).
        #[arg(long)]
        zero_attention: bool,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Dump attention and feature maps of a LEA-Net checkpoint for one image.
    Visualize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image stem; the first anomalous image when omitted.
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_resize(s: &str) -> std::result::Result<Resize, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown resize `{s}` (expected nearest or bilinear)"))
}

fn parse_texture(s: &str) -> std::result::Result<Texture, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown texture `{s}` (expected cells or waves)"))
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::TrainColorizer { common, .. }
            | Command::GenMaps { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::Visualize { common, .. } => common,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = e.exit_code();
            if code != 0 && !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return code;
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.command.common().jobs.unwrap_or(0))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(cli.command)),
        Err(e) => Err(Error::Harness(format!("cannot start worker threads: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Harness(format!("invalid configuration {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    Ok(cfg)
}

/// The top-level extent governs the colorizer and synthetic images too.
fn set_extent(cfg: &mut ExperimentConfig, extent: Option<usize>) {
    if let Some(e) = extent {
        cfg.extent = e;
    }
    cfg.colorizer.extent = cfg.extent;
    if let DataSource::Synthetic(p) = &mut cfg.source {
        p.extent = cfg.extent as u32;
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        set_extent(cfg, self.extent);
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        if let Some(a) = self.adn {
            cfg.adn = a;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch {
            cfg.train.batch = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.adam.lr = lr;
        }
    }
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64> {
    match cfg.seeds.first() {
        Some(&s) => Ok(s),
        None => Err(Error::Harness("no seed configured".into())),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load(data: &DataArgs, extent: usize) -> Result<Dataset> {
    load_dataset(&data.data, extent as u32, data.resize.unwrap_or_default())
}

/// Maps stored with the dataset, or all-zero maps for the plain baseline.
fn dataset_maps(ds: &Dataset, variant: Variant, dir: &Path, extent: usize) -> Result<Vec<AnomalyMap>> {
    match (&ds.maps, variant) {
        (Some(m), _) => Ok(m.clone()),
        (None, Variant::Baseline) => Ok((0..ds.len())
            .map(|_| AnomalyMap {
                width: extent as u32,
                height: extent as u32,
                values: vec![0.0; extent * extent],
                normalized: None,
            })
            .collect()),
        (None, _) => Err(Error::Harness(format!(
            "{} has no anomaly maps for every image; run gen-maps first",
            dir.display()
        ))),
    }
}

fn all_samples(ds: &Dataset, maps: &[AnomalyMap], variant: Variant) -> Result<Vec<Sample>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    Prepared::new(ds, maps).samples(variant, &idx)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            pos,
            neg,
            hue_shift,
            texture,
            extent,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            set_extent(&mut cfg, extent);
            let mut p = match &cfg.source {
                DataSource::Synthetic(p) => *p,
                DataSource::Directory { .. } => SynthParams {
                    extent: cfg.extent as u32,
                    ..SynthParams::default()
                },
            };
            p.n_pos = pos.unwrap_or(p.n_pos);
            p.n_neg = neg.unwrap_or(p.n_neg);
            p.hue_shift = hue_shift.unwrap_or(p.hue_shift);
            p.texture = texture.unwrap_or(p.texture);
            p.seed = first_seed(&cfg)?;
            let ds = synth_dataset(&p)?;
            ds.write(&out)?;
            let params = serde_json::to_string_pretty(&p).map_err(|e| Error::Harness(e.to_string()))?;
            write_file(&out.join("synth.json"), &params)?;
            println!("wrote {} anomalous and {} normal images to {}", p.n_pos, p.n_neg, out.display());
        }
        Command::TrainColorizer {
            data,
            out,
            epochs,
            levels,
            patience,
            extent,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            set_extent(&mut cfg, extent);
            let c = ColorizerConfig {
                epochs: epochs.unwrap_or(cfg.colorizer.epochs),
                levels: levels.unwrap_or(cfg.colorizer.levels),
                patience: patience.unwrap_or(cfg.colorizer.patience),
                seed: rng::derive(first_seed(&cfg)?, "colorizer"),
                ..cfg.colorizer
            };
            let ds = load(&data, cfg.extent)?;
            let normals: Vec<LabImage> = ds
                .images
                .iter()
                .zip(&ds.labels)
                .filter(|(_, &y)| y == 0)
                .map(|(img, _)| LabImage::from_rgb(img))
                .collect();
            let (colorizer, history) = train_colorizer(&normals, &vec![0; normals.len()], &c)?;
            create_dir(&out)?;
            write_checkpoint(&out.join("colorizer.ckpt"), &colorizer.to_checkpoint()?)?;
            let mut csv = String::from("epoch,train_loss,validation_loss\n");
            for (i, t) in history.train.iter().enumerate() {
                let v = history.validation.get(i).map(|v| v.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{t},{v}\n", i + 1));
            }
            write_file(&out.join("colorizer_history.csv"), &csv)?;
            println!(
                "trained colorizer on {} normal images for {} epochs (best epoch {})",
                normals.len(),
                history.train.len(),
                history.best_epoch + 1
            );
        }
        Command::GenMaps { data, colorizer, .. } => {
            let mut c = Colorizer::from_checkpoint(&read_checkpoint(&colorizer)?)?;
            let ds = load(&data, c.config().extent)?;
            let lab: Vec<LabImage> = ds.images.iter().map(LabImage::from_rgb).collect();
            let maps = c.maps(&lab)?;
            for (i, m) in maps.iter().enumerate() {
                let dir = data.data.join(Dataset::class_dir(ds.labels[i]));
                write_map(&dir, &ds.names[i], m)?;
            }
            println!("wrote {} anomaly maps under {}", maps.len(), data.data.display());
        }
        Command::Train {
            data,
            variant,
            point,
            out,
            model,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            model.apply(&mut cfg);
            if point.is_some() && !variant.is_point_swept() {
                return Err(Error::Harness(format!("variant `{variant}` takes no attention point")));
            }
            let seed = first_seed(&cfg)?;
            let ds = load(&data, cfg.extent)?;
            let maps = dataset_maps(&ds, variant, &data.data, cfg.extent)?;
            let samples = all_samples(&ds, &maps, variant)?;
            let train = TrainConfig {
                seed: rng::derive(seed, "train"),
                ..cfg.train
            };
            let mut m = Trained::new(&cfg, variant, point, rng::derive(seed, "model"))?;
            let history = m.train(&samples, &train)?;
            create_dir(&out)?;
            write_checkpoint(&out.join("model.ckpt"), &m.to_checkpoint())?;
            let mut csv = String::from("epoch,total_loss,attention_loss,detection_loss\n");
            for (i, l) in history.iter().enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", i + 1, l.total, l.attention, l.detection));
            }
            write_file(&out.join("train_metrics.csv"), &csv)?;
            let extra = serde_json::json!({ "variant": variant, "point": point, "images": ds.len() });
            write_file(&out.join("metadata.json"), &metadata_json(&cfg, extra)?)?;
            let last = history.last().map(|l| l.total).unwrap_or(f64::NAN);
            println!("trained {variant} on {} images; final loss {last:.4}", ds.len());
        }
        Command::Eval { data, model, out, .. } => {
            let mut m = Trained::from_checkpoint(&read_checkpoint(&model)?)?;
            let ds = load(&data, m.extent())?;
            let maps = dataset_maps(&ds, m.variant(), &data.data, m.extent())?;
            let samples = all_samples(&ds, &maps, m.variant())?;
            let preds = m.predict(&samples.iter().collect::<Vec<_>>())?;
            let score = f1(&preds, &ds.labels, 0.5)?;
            create_dir(&out)?;
            let mut csv = String::from("name,label,probability\n");
            for (i, p) in preds.iter().enumerate() {
                csv.push_str(&format!("{},{},{p}\n", ds.names[i], ds.labels[i]));
            }
            write_file(&out.join("predictions.csv"), &csv)?;
            let point = m.point().map(|p| p.to_string()).unwrap_or_default();
            write_file(
                &out.join("eval_metrics.csv"),
                &format!("variant,point,images,f1\n{},{point},{},{score}\n", m.variant(), ds.len()),
            )?;
            println!("{}: F1 {score:.4} on {} images", m.variant(), ds.len());
        }
        Command::Sweep {
            data,
            resize,
            out,
            variants,
            points,
            folds,
            ratios,
            zero_attention,
            model,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(path) = data {
                cfg.source = DataSource::Directory {
                    path,
                    resize: resize.unwrap_or_default(),
                };
            }
            model.apply(&mut cfg);
            if !variants.is_empty() {
                cfg.variants = variants;
            }
            if !points.is_empty() {
                cfg.points = points;
            }
            cfg.folds = folds.unwrap_or(cfg.folds);
            cfg.zero_attention |= zero_attention;
            match ratios {
                None => {
                    let rows = run_experiment(&cfg)?;
                    emit_report(&rows, &cfg, &out)?;
                    print!("{}", text_table(&rows));
                }
                Some(r) => {
                    let r = if r.is_empty() { DEFAULT_RATIOS.to_vec() } else { r };
                    let groups = imbalance_sweep(&cfg, &r)?;
                    emit_sweep_report(&groups, &cfg, &out)?;
                    for g in &groups {
                        println!("ratio {}:", g.ratio);
                        print!("{}", text_table(&g.rows));
                    }
                }
            }
        }
        Command::Visualize {
            data, model, out, name, ..
        } => {
            let m = Trained::from_checkpoint(&read_checkpoint(&model)?)?;
            let Trained::Lea { variant, model: mut lea } = m else {
                return Err(Error::Harness(format!(
                    "visualize needs a CAAN checkpoint, got `{}`",
                    m.variant()
                )));
            };
            let extent = lea.adn().input_extent().height;
            let ds = load(&data, extent)?;
            let i = match &name {
                Some(n) => ds.names.iter().position(|s| s == n),
                None => ds.labels.iter().position(|&y| y == 1),
            };
            let Some(i) = i else {
                return Err(Error::Harness(match name {
                    Some(n) => format!("no image named `{n}` in {}", data.data.display()),
                    None => format!("{} has no anomalous image", data.data.display()),
                }));
            };
            let maps = dataset_maps(&ds, variant, &data.data, extent)?;
            let sample = Prepared::new(&ds, &maps).samples(variant, &[i])?.remove(0);
            create_dir(&out)?;
            let dump = leanet::harness::dump_feature_maps(&mut lea, &sample, &out)?;
            println!(
                "wrote {} images for `{}` at point {} to {}",
                dump.files.len(),
                ds.names[i],
                dump.point,
                out.display()
            );
        }
    }
    Ok(())
}
