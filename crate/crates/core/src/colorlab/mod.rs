//! sRGB ↔ CIELAB (D65, 2° observer), CIEDE2000, and Fancy PCA.

pub mod io;

use image::RgbImage;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng;

/// sRGB primaries to XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// XYZ to linear sRGB, the inverse of [`RGB_TO_XYZ`].
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

/// Reference white: the XYZ of linear RGB (1, 1, 1), so sRGB white maps to
/// L = 100 with a = b = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabPixel {
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        LabPixel { l, a, b }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Recolored,
}

/// Row-major grid of Lab pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    width: u32,
    height: u32,
    pixels: Vec<LabPixel>,
    pub provenance: Provenance,
}

impl LabImage {
    pub fn new(width: u32, height: u32, pixels: Vec<LabPixel>, provenance: Provenance) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Color, "image extents must be positive, got {width}×{height}");
        }
        if pixels.len() != (width * height) as usize {
            bail!(
                Color,
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            );
        }
        Ok(LabImage {
            width,
            height,
            pixels,
            provenance,
        })
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let pixels = img.pixels().map(|p| srgb_to_lab(p[0], p[1], p[2])).collect();
        LabImage {
            width: img.width(),
            height: img.height(),
            pixels,
            provenance: Provenance::Original,
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            image::Rgb(lab_to_srgb(self.pixel(x, y)))
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel(&self, x: u32, y: u32) -> LabPixel {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn pixels(&self) -> &[LabPixel] {
        &self.pixels
    }
}

fn decode(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn encode(c: f64) -> u8 {
    let c = c.clamp(0.0, 1.0);
    let v = if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    };
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn srgb_to_lab(r: u8, g: u8, b: u8) -> LabPixel {
    let rgb = [decode(r), decode(g), decode(b)];
    let xyz: Vec<f64> = RGB_TO_XYZ
        .iter()
        .zip(WHITE)
        .map(|(row, w)| (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]) / w)
        .collect();
    let (fx, fy, fz) = (f(xyz[0]), f(xyz[1]), f(xyz[2]));
    LabPixel {
        l: (116.0 * fy - 16.0).max(0.0),
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut colors are clamped.
pub fn lab_to_srgb(p: LabPixel) -> [u8; 3] {
    let fy = (p.l + 16.0) / 116.0;
    let fx = fy + p.a / 500.0;
    let fz = fy - p.b / 200.0;
    let xyz = [f_inv(fx) * WHITE[0], f_inv(fy) * WHITE[1], f_inv(fz) * WHITE[2]];
    let mut out = [0u8; 3];
    for (o, row) in out.iter_mut().zip(XYZ_TO_RGB) {
        *o = encode(row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2]);
    }
    out
}

/// CIEDE2000 color difference with `k_L = k_C = k_H = 1`.
pub fn ciede2000(p: LabPixel, q: LabPixel) -> f64 {
    use std::f64::consts::{PI, TAU};
    const POW25_7: f64 = 6_103_515_625.0;
    let c_bar = (p.a.hypot(p.b) + q.a.hypot(q.b)) / 2.0;
    let c7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c7 / (c7 + POW25_7)).sqrt());
    let prime = |lab: LabPixel| {
        let a = (1.0 + g) * lab.a;
        let c = a.hypot(lab.b);
        let h = if a == 0.0 && lab.b == 0.0 {
            0.0
        } else {
            lab.b.atan2(a).rem_euclid(TAU)
        };
        (c, h)
    };
    let (c1, h1) = prime(p);
    let (c2, h2) = prime(q);

    let dl = q.l - p.l;
    let dc = c2 - c1;
    let chroma_zero = c1 * c2 == 0.0;
    let dh = if chroma_zero {
        0.0
    } else {
        let d = h2 - h1;
        if d.abs() <= PI {
            d
        } else if d > PI {
            d - TAU
        } else {
            d + TAU
        }
    };
    let dh_big = 2.0 * (c1 * c2).sqrt() * (dh / 2.0).sin();

    let l_bar = (p.l + q.l) / 2.0;
    let c_bar_p = (c1 + c2) / 2.0;
    let h_bar = if chroma_zero {
        h1 + h2
    } else if (h1 - h2).abs() <= PI {
        (h1 + h2) / 2.0
    } else if h1 + h2 < TAU {
        (h1 + h2 + TAU) / 2.0
    } else {
        (h1 + h2 - TAU) / 2.0
    };
    let deg = PI / 180.0;
    let t = 1.0 - 0.17 * (h_bar - 30.0 * deg).cos() + 0.24 * (2.0 * h_bar).cos() + 0.32 * (3.0 * h_bar + 6.0 * deg).cos()
        - 0.20 * (4.0 * h_bar - 63.0 * deg).cos();
    let d_theta = 30.0 * deg * (-((h_bar / deg - 275.0) / 25.0).powi(2)).exp();
    let cp7 = c_bar_p.powi(7);
    let r_c = 2.0 * (cp7 / (cp7 + POW25_7)).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * c_bar_p;
    let s_h = 1.0 + 0.015 * c_bar_p * t;
    let r_t = -(2.0 * d_theta).sin() * r_c;
    let (tl, tc, th) = (dl / s_l, dc / s_c, dh_big / s_h);
    (tl * tl + tc * tc + th * th + r_t * tc * th).max(0.0).sqrt()
}

/// The 34 standard CIEDE2000 verification pairs (Sharma, Wu and Dalal, 2005):
/// `[L1, a1, b1, L2, a2, b2, ΔE00]` with ΔE00 rounded to four decimals.
#[rustfmt::skip]
pub const VERIFICATION_PAIRS: [[f64; 7]; 34] = [
    [50.0, 2.6772, -79.7751, 50.0, 0.0, -82.7485, 2.0425],
    [50.0, 3.1571, -77.2803, 50.0, 0.0, -82.7485, 2.8615],
    [50.0, 2.8361, -74.0200, 50.0, 0.0, -82.7485, 3.4412],
    [50.0, -1.3802, -84.2814, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, -1.1848, -84.8006, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, -0.9009, -85.5211, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, 0.0, 0.0, 50.0, -1.0, 2.0, 2.3669],
    [50.0, -1.0, 2.0, 50.0, 0.0, 0.0, 2.3669],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0009, 7.1792],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0010, 7.1792],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0011, 7.2195],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0012, 7.2195],
    [50.0, -0.001, 2.49, 50.0, 0.0009, -2.49, 4.8045],
    [50.0, -0.001, 2.49, 50.0, 0.0010, -2.49, 4.8045],
    [50.0, -0.001, 2.49, 50.0, 0.0011, -2.49, 4.7461],
    [50.0, 2.5, 0.0, 50.0, 0.0, -2.5, 4.3065],
    [50.0, 2.5, 0.0, 73.0, 25.0, -18.0, 27.1492],
    [50.0, 2.5, 0.0, 61.0, -5.0, 29.0, 22.8977],
    [50.0, 2.5, 0.0, 56.0, -27.0, -3.0, 31.9030],
    [50.0, 2.5, 0.0, 58.0, 24.0, 15.0, 19.4535],
    [50.0, 2.5, 0.0, 50.0, 3.1736, 0.5854, 1.0000],
    [50.0, 2.5, 0.0, 50.0, 3.2972, 0.0, 1.0000],
    [50.0, 2.5, 0.0, 50.0, 1.8634, 0.5757, 1.0000],
    [50.0, 2.5, 0.0, 50.0, 3.2592, 0.3350, 1.0000],
    [60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644],
    [63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630],
    [61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731],
    [35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645],
    [22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373],
    [36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146],
    [90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441],
    [90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381],
    [6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377],
    [2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082],
];

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching unit eigenvectors as columns.
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let scale = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off <= f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// RGB shift `Σ αᵢ λᵢ eᵢ` (in 0–1 units) for the pixel covariance of `img`.
pub fn fancy_pca_shift(img: &RgbImage, alpha: [f64; 3]) -> [f64; 3] {
    let n = (img.width() * img.height()) as f64;
    let mut mean = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            mean[c] += p[c] as f64 / 255.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; 3]; 3];
    for p in img.pixels() {
        let d: Vec<f64> = (0..3).map(|c| p[c] as f64 / 255.0 - mean[c]).collect();
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|v| *v /= n);
    let (lambda, vecs) = symmetric_eigen3(cov);
    let mut shift = [0.0; 3];
    for (i, s) in shift.iter_mut().enumerate() {
        for k in 0..3 {
            *s += alpha[k] * lambda[k].max(0.0) * vecs[i][k];
        }
    }
    shift
}

/// Fancy PCA color augmentation with `αᵢ ~ N(0, σ_α)` drawn from `seed`.
/// Pixel values are taken in 0–1 units for the covariance and the shift.
pub fn fancy_pca(img: &RgbImage, sigma_alpha: f64, seed: u64) -> Result<RgbImage> {
    if !(sigma_alpha >= 0.0 && sigma_alpha.is_finite()) {
        bail!(Color, "fancy PCA strength must be finite and non-negative, got {sigma_alpha}");
    }
    if sigma_alpha == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma_alpha).expect("validated sigma");
    let mut r = rng::stream(seed, "fancy_pca");
    let alpha = [normal.sample(&mut r), normal.sample(&mut r), normal.sample(&mut r)];
    Ok(apply_shift(img, fancy_pca_shift(img, alpha)))
}

fn apply_shift(img: &RgbImage, shift: [f64; 3]) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p[c] = (p[c] as f64 + shift[c] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests;
