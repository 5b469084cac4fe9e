//! PNG encoding for color images (8-bit RGB) and soft masks (16-bit grayscale).

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn encode(image: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

fn check_len(width: u32, height: u32, len: usize) -> Result<()> {
    if width as usize * height as usize != len {
        return Err(Error::invalid(format!(
            "{len} pixels do not fill a {width}x{height} image"
        )));
    }
    Ok(())
}

/// Row-major linear RGB in [0, 1] to an 8-bit PNG.
pub fn encode_rgb8(width: u32, height: u32, pixels: &[[f64; 3]]) -> Result<Vec<u8>> {
    check_len(width, height, pixels.len())?;
    let raw: Vec<u8> = pixels.iter().flat_map(|p| p.map(quantize_u8)).collect();
    let img = ImageBuffer::<Rgb<u8>, _>::from_raw(width, height, raw).expect("length checked");
    encode(DynamicImage::ImageRgb8(img))
}

/// Row-major scalars in [0, 1] to a 16-bit grayscale PNG.
pub fn encode_gray16(width: u32, height: u32, values: &[f64]) -> Result<Vec<u8>> {
    check_len(width, height, values.len())?;
    let raw: Vec<u16> = values.iter().map(|&v| quantize_u16(v)).collect();
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(width, height, raw).expect("length checked");
    encode(DynamicImage::ImageLuma16(img))
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}

pub fn decode_rgb8(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<[f64; 3]>)> {
    match decode(bytes, path)? {
        DynamicImage::ImageRgb8(img) => {
            let pixels = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
            Ok((img.width(), img.height(), pixels))
        }
        other => Err(Error::format(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    }
}

pub fn decode_gray16(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    match decode(bytes, path)? {
        DynamicImage::ImageLuma16(img) => {
            let values = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
            Ok((img.width(), img.height(), values))
        }
        other => Err(Error::format(path, format!("expected 16-bit grayscale, found {:?}", other.color()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_quantization_error_is_bounded() {
        let values: Vec<f64> = (0..64).map(|i| (i as f64 * 0.137).fract()).collect();
        let png = encode_gray16(8, 8, &values).unwrap();
        let (w, h, back) = decode_gray16(&png, Path::new("x.png")).unwrap();
        assert_eq!((w, h), (8, 8));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn rgb8_round_trip_is_exact_after_quantization() {
        let pixels: Vec<[f64; 3]> = (0..12).map(|i| [i as f64 / 11.0, 0.5, 1.0 - i as f64 / 11.0]).collect();
        let png = encode_rgb8(4, 3, &pixels).unwrap();
        let (_, _, back) = decode_rgb8(&png, Path::new("x.png")).unwrap();
        let again = decode_rgb8(&encode_rgb8(4, 3, &back).unwrap(), Path::new("x.png")).unwrap().2;
        assert_eq!(back, again);
    }

    #[test]
    fn wrong_pixel_type_is_rejected() {
        let png = encode_gray16(2, 2, &[0.0; 4]).unwrap();
        assert!(decode_rgb8(&png, Path::new("m.png")).is_err());
        assert!(encode_rgb8(3, 3, &[[0.0; 3]; 4]).is_err());
    }
}
