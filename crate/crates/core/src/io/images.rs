//! PNG/JPEG decoding to linear `[0, 1]` samples and 8-bit / 16-bit PNG encoding.
//!
//! No transfer curve is applied in either direction.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scene::{Image, ScalarMap};

/// `[0, 1]` sample to a byte: clamp, scale by 255, round half away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[0, 1]` sample to a 16-bit word with the same rounding rule.
pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_16_bit(c: ColorType) -> bool {
    matches!(c, ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16)
}

/// Reads an RGB image; 8-bit samples are divided by 255, 16-bit by 65535.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if is_16_bit(img.color()) {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else if matches!(img.color(), ColorType::Rgb32F | ColorType::Rgba32F) {
        img.to_rgb32f().into_raw().into_iter().map(f64::from).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Image::from_data(w, h, data)
}

/// Writes an 8-bit RGB PNG.
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize_u8(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::Argument("image buffer does not match its dimensions".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a grayscale depth PNG as samples in `[0, 1]` (16-bit words / 65535, bytes / 255).
pub fn read_depth_png(path: &Path) -> Result<ScalarMap> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_16_bit(img.color()) {
        img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Ok(ScalarMap {
        width: w,
        height: h,
        data,
    })
}

/// Writes `map / max` as a 16-bit grayscale PNG; returns the normalizer used.
///
/// `max` is the largest finite value of the map (1 when the map is all zero).
pub fn write_depth_png(map: &ScalarMap, path: &Path) -> Result<f64> {
    let max = map.data.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    let words: Vec<u16> = map.data.iter().map(|&v| quantize_u16(v / max)).collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(map.width as u32, map.height as u32, words)
        .ok_or_else(|| Error::Argument("depth buffer does not match its dimensions".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(-0.2), 0);
        assert_eq!(quantize_u8(1.7), 255);
        assert_eq!(quantize_u8(1.0 / 255.0), 1);
        assert_eq!(quantize_u16(1.0), 65535);
    }
}
