use std::path::Path;

use super::atomic_write;
use crate::error::{Error, Result};

/// 8-bit gray levels of `values` scaled linearly so that `max` (default:
/// the largest value) maps to 255. Negative values clamp to black.
pub fn gray_pixels(values: &[f64], max: Option<f64>) -> Vec<u8> {
    let top = max.unwrap_or_else(|| values.iter().copied().fold(0.0, f64::max));
    values
        .iter()
        .map(|&v| {
            if top > 0.0 && v.is_finite() {
                ((v / top).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64], max: Option<f64>) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::dim(format!("{} values for a {width}x{height} image", values.len())));
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&gray_pixels(values, max))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    atomic_write(path, &buf)
}
