//! Image files: 8-bit RGB PNG or PPM for datasets, 8-bit grayscale PNG
//! previews, and raw `f32` grids (`u32` width, `u32` height, then
//! little-endian row-major values).

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{bail, Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a PNG or PPM file as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(img.to_rgb8())
}

/// Writes PNG unless the extension is `.ppm`.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let fmt = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    img.save_with_format(path, fmt).map_err(|e| image_err(path, e))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Quantizes values in `[0, 1]` to 0–255 (values outside are clamped).
pub fn unit_to_gray(width: u32, height: u32, values: &[f32]) -> Result<GrayImage> {
    if values.len() != (width * height) as usize {
        bail!(
            Color,
            "{width}×{height} preview needs {} values, got {}",
            width * height,
            values.len()
        );
    }
    let px = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(width, height, px).expect("length checked"))
}

pub fn write_f32_grid(path: &Path, width: u32, height: u32, values: &[f32]) -> Result<()> {
    if values.len() != (width * height) as usize {
        bail!(Color, "grid {width}×{height} does not hold {} values", values.len());
    }
    let mut bytes = Vec::with_capacity(8 + 4 * values.len());
    bytes.extend_from_slice(&width.to_le_bytes());
    bytes.extend_from_slice(&height.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_grid(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        bail!(Color, "{}: truncated grid header", path.display());
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let expected = 8 + 4 * (w as usize) * (h as usize);
    if bytes.len() != expected {
        bail!(
            Color,
            "{}: {w}×{h} grid needs {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        );
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((w, h, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_grid_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.anom.f32");
        let vals = [0.0f32, 1.5, -2.0, f32::MAX, 1e-30, 7.0];
        write_f32_grid(&p, 3, 2, &vals).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&raw[12..16], &1.5f32.to_le_bytes());
        assert_eq!(read_f32_grid(&p).unwrap(), (3, 2, vals.to_vec()));
        std::fs::write(&p, &raw[..raw.len() - 1]).unwrap();
        assert!(read_f32_grid(&p).is_err());
    }

    #[test]
    fn rgb_png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 7]));
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_rgb(&p, &img).unwrap();
            assert_eq!(read_rgb(&p).unwrap(), img);
        }
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        let err = read_rgb(&bad).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn gray_quantization() {
        let g = unit_to_gray(3, 1, &[0.0, 0.5, 2.0]).unwrap();
        assert_eq!(g.as_raw(), &[0, 128, 255]);
    }
}
