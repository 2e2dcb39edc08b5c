use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::colorlab::{lab_to_srgb, srgb_to_lab, LabPixel};
use crate::error::{bail, Result};
use crate::rng;

/// Lightness pattern shared by every synthetic image family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Sum of three random plane waves.
    Waves,
    /// Bilinearly upsampled random grid.
    Cells,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_pos: usize,
    pub n_neg: usize,
    pub extent: u32,
    pub texture: Texture,
    /// Background hue in degrees.
    pub hue: f64,
    /// Hue offset of anomalous patches, degrees in (0, 180].
    pub hue_shift: f64,
    /// Patch semi-axis range as a fraction of the extent, within (0, 0.5].
    pub patch_min: f64,
    pub patch_max: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_pos: 50,
            n_neg: 152,
            extent: 64,
            texture: Texture::Cells,
            hue: 120.0,
            hue_shift: 35.0,
            patch_min: 0.06,
            patch_max: 0.12,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.n_pos + self.n_neg < 4 {
            bail!(Harness, "synthetic set needs at least 4 images, got {}", self.n_pos + self.n_neg);
        }
        if !(self.hue_shift > 0.0 && self.hue_shift <= 180.0) {
            bail!(Harness, "hue shift must be in (0, 180], got {}", self.hue_shift);
        }
        if !(self.patch_min > 0.0 && self.patch_min <= self.patch_max && self.patch_max <= 0.5) {
            bail!(
                Harness,
                "patch fractions must satisfy 0 < min ≤ max ≤ 0.5, got {} and {}",
                self.patch_min,
                self.patch_max
            );
        }
        if self.extent == 0 || self.patch_min * (self.extent as f64) < 0.5 {
            bail!(
                Harness,
                "patches of fraction {} on a {}-pixel extent have zero area",
                self.patch_min,
                self.extent
            );
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Smooth field in roughly `[-1, 1]`.
fn field(extent: u32, texture: Texture, r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = extent as usize;
    match texture {
        Texture::Waves => {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let angle = r.random_range(0.0..std::f64::consts::TAU);
                    let freq = r.random_range(1.0..4.0) * std::f64::consts::TAU / extent as f64;
                    (freq * angle.cos(), freq * angle.sin(), r.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            (0..n * n)
                .map(|i| {
                    let (x, y) = ((i % n) as f64, (i / n) as f64);
                    waves.iter().map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum::<f64>() / 3.0
                })
                .collect()
        }
        Texture::Cells => {
            let g = 6;
            let grid: Vec<f64> = (0..g * g).map(|_| r.random_range(-1.0..1.0)).collect();
            let at = |gx: usize, gy: usize| grid[gy.min(g - 1) * g + gx.min(g - 1)];
            (0..n * n)
                .map(|i| {
                    let fx = (i % n) as f64 / n as f64 * (g - 1) as f64;
                    let fy = (i / n) as f64 / n as f64 * (g - 1) as f64;
                    let (x0, y0) = (fx as usize, fy as usize);
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                    let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                    top * (1.0 - ty) + bottom * ty
                })
                .collect()
        }
    }
}

fn lch(l: f64, c: f64, h_deg: f64) -> LabPixel {
    let h = h_deg.to_radians();
    LabPixel::new(l.clamp(0.0, 100.0), c * h.cos(), c * h.sin())
}

/// One image and its anomaly mask (empty for normals).
fn render(p: &SynthParams, positive: bool, r: &mut ChaCha8Rng) -> (RgbImage, Vec<bool>) {
    let n = p.extent as usize;
    let light = field(p.extent, p.texture, r);
    let chroma = field(p.extent, Texture::Cells, r);
    let tint = field(p.extent, Texture::Cells, r);
    let base_l = r.random_range(45.0..65.0);
    let mut ellipses = Vec::new();
    if positive {
        for _ in 0..r.random_range(1..=3) {
            let e = p.extent as f64;
            let rx = r.random_range(p.patch_min..=p.patch_max) * e;
            let ry = r.random_range(p.patch_min..=p.patch_max) * e;
            let margin = rx.max(ry);
            let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
            ellipses.push(Ellipse {
                cx: r.random_range(margin..(e - margin).max(margin + 1.0)).floor() + 0.5,
                cy: r.random_range(margin..(e - margin).max(margin + 1.0)).floor() + 0.5,
                rx,
                ry,
                cos: angle.cos(),
                sin: angle.sin(),
            });
        }
    }
    let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut mask = vec![false; if positive { n * n } else { 0 }];
    let img = RgbImage::from_fn(p.extent, p.extent, |x, y| {
        let i = y as usize * n + x as usize;
        let l = base_l + 15.0 * light[i];
        let c = 28.0 + 6.0 * chroma[i];
        let mut h = p.hue + 6.0 * tint[i];
        if ellipses.iter().any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5)) {
            mask[i] = true;
            h += sign * p.hue_shift;
        }
        image::Rgb(lab_to_srgb(lch(l, c, h)))
    });
    (img, mask)
}

/// Textured images of one global hue; positives also carry 1 to 3
/// elliptical patches whose hue is shifted at unchanged lightness and
/// chroma, so only color separates them from the background.
pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    p.validate()?;
    let mut images = Vec::with_capacity(p.n_pos + p.n_neg);
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut names = Vec::new();
    for (label, count, prefix) in [(1u8, p.n_pos, "pos"), (0u8, p.n_neg, "neg")] {
        for i in 0..count {
            let mut r = rng::stream(rng::derive_indexed(p.seed, prefix, i as u64), "image");
            let (img, mask) = render(p, label == 1, &mut r);
            images.push(img);
            labels.push(label);
            masks.push(Some(mask));
            names.push(format!("{prefix}_{i:04}"));
        }
    }
    Ok(Dataset {
        images,
        labels,
        masks,
        names,
        maps: None,
    })
}

/// `img` with every pixel's hue replaced by `hue` degrees, keeping L and C.
pub fn hue_neutralized(img: &RgbImage, hue: f64) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.get_pixel(x, y).0;
        let p = srgb_to_lab(r, g, b);
        let c = p.a.hypot(p.b);
        image::Rgb(lab_to_srgb(lch(p.l, c, hue)))
    })
}
