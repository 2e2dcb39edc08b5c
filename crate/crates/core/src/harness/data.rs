use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::anomap::{map_paths, read_map, AnomalyMap};
use crate::colorlab::io;
use crate::error::{bail, Error, Result};
use crate::rng;

/// Labeled images, optional ground-truth masks and optional anomaly maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub labels: Vec<u8>,
    /// Row-major anomaly masks; `None` when unknown, empty for normals.
    pub masks: Vec<Option<Vec<bool>>>,
    /// File stems, unique within the set.
    pub names: Vec<String>,
    pub maps: Option<Vec<AnomalyMap>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&y| y == label).count()
    }

    /// The subset at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            maps: self.maps.as_ref().map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
        }
    }

    /// Relative directory of an image: `positive` or `negative`.
    pub fn class_dir(label: u8) -> &'static str {
        if label == 1 {
            "positive"
        } else {
            "negative"
        }
    }

    /// Writes `positive/`, `negative/` PNGs, `masks/` for known positive
    /// masks, and a `labels.csv` manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = String::from("name,label\n");
        for sub in ["positive", "negative"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for i in 0..self.len() {
            let (name, label) = (&self.names[i], self.labels[i]);
            io::write_rgb(&dir.join(Self::class_dir(label)).join(format!("{name}.png")), &self.images[i])?;
            if let Some(mask) = self.masks[i].as_ref().filter(|m| !m.is_empty()) {
                let md = dir.join("masks");
                fs::create_dir_all(&md).map_err(|e| Error::io(&md, e))?;
                let (w, h) = self.images[i].dimensions();
                let unit: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                io::write_gray_png(&md.join(format!("{name}.png")), &io::unit_to_gray(w, h, &unit)?)?;
            }
            manifest.push_str(&format!("{name},{label}\n"));
        }
        let path = dir.join("labels.csv");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }
}

/// Resampling used when loaded images do not match the configured extent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resize {
    #[default]
    Nearest,
    Bilinear,
}

fn list_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.ends_with(".png") && !name.ends_with(".anom.png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads `positive/` and `negative/` PNGs in lexicographic order, resizing
/// to `extent × extent`. Masks come from `masks/<stem>.png` and anomaly maps
/// from `<stem>.anom.f32` sidecars when every image has one.
pub fn load_dataset(dir: &Path, extent: u32, resize: Resize) -> Result<Dataset> {
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        masks: Vec::new(),
        names: Vec::new(),
        maps: None,
    };
    let mut maps = Vec::new();
    for label in [1u8, 0] {
        let sub = dir.join(Dataset::class_dir(label));
        if !sub.is_dir() {
            bail!(Harness, "{} is missing", sub.display());
        }
        let files = list_pngs(&sub)?;
        if files.is_empty() {
            bail!(Harness, "{} holds no PNG files", sub.display());
        }
        for path in files {
            let mut img = io::read_rgb(&path)?;
            if img.dimensions() != (extent, extent) {
                let filter = match resize {
                    Resize::Nearest => FilterType::Nearest,
                    Resize::Bilinear => FilterType::Triangle,
                };
                img = image::imageops::resize(&img, extent, extent, filter);
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mask_path = dir.join("masks").join(format!("{stem}.png"));
            let mask = if label == 0 {
                Some(Vec::new())
            } else if mask_path.is_file() {
                let m = image::open(&mask_path)
                    .map_err(|e| Error::Image {
                        path: mask_path.clone(),
                        source: e,
                    })?
                    .to_luma8();
                let m = image::imageops::resize(&m, extent, extent, FilterType::Nearest);
                Some(m.pixels().map(|p| p[0] >= 128).collect())
            } else {
                None
            };
            let (_, raw) = map_paths(&sub, &stem);
            maps.push(if raw.is_file() { Some(read_map(&raw)?) } else { None });
            ds.images.push(img);
            ds.labels.push(label);
            ds.masks.push(mask);
            ds.names.push(stem);
        }
    }
    if maps.iter().all(Option::is_some) {
        let maps: Vec<AnomalyMap> = maps.into_iter().flatten().collect();
        if let Some(m) = maps.iter().find(|m| (m.width, m.height) != (extent, extent)) {
            bail!(
                Harness,
                "anomaly maps are {}×{} but images are {extent}×{extent}; regenerate them",
                m.width,
                m.height
            );
        }
        ds.maps = Some(maps);
    }
    Ok(ds)
}

/// `k` disjoint, sorted folds whose per-class counts differ from exact
/// proportionality by less than one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        bail!(Harness, "need at least 2 folds, got {k}");
    }
    let mut r = rng::stream(seed, "kfold");
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for label in [1u8, 0] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.len() < k {
            bail!(
                Harness,
                "class {label} has {} instances, fewer than {k} folds",
                idx.len()
            );
        }
        idx.shuffle(&mut r);
        for i in idx {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        bail!(Harness, "labels must be 0 or 1, found {bad}");
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// `2TP / (2TP + FP + FN)` at `threshold`, or 0 when nothing is positive.
pub fn f1(preds: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        bail!(
            Harness,
            "F1 needs equal, non-empty inputs; got {} predictions and {} labels",
            preds.len(),
            labels.len()
        );
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Positive count giving ratio `r = pos / (pos + neg)` with `neg` fixed.
pub fn positives_for_ratio(ratio: f64, n_neg: usize) -> usize {
    (ratio * n_neg as f64 / (1.0 - ratio)).round() as usize
}

/// Keeps every negative and a seeded random subset of positives so the
/// positive fraction is `ratio`. Returns the kept indices, sorted.
pub fn subsample_to_ratio(labels: &[u8], ratio: f64, min_pos: usize, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Harness, "positive ratio must be in (0, 1), got {ratio}");
    }
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let want = positives_for_ratio(ratio, neg.len());
    if want < min_pos {
        bail!(
            Harness,
            "ratio {ratio} leaves {want} positives, fewer than the {min_pos} folds need"
        );
    }
    if want > pos.len() {
        bail!(
            Harness,
            "ratio {ratio} needs {want} positives but only {} exist",
            pos.len()
        );
    }
    pos.shuffle(&mut rng::stream(seed, "subsample"));
    let mut keep: Vec<usize> = neg.into_iter().chain(pos.into_iter().take(want)).collect();
    keep.sort_unstable();
    Ok(keep)
}
