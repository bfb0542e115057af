//! PNG input and output.
//!
//! Written images are 8-bit RGB. Read images may carry an alpha channel;
//! alpha is composited onto a white background at load time, matching the
//! white-background convention of the synthetic datasets.

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::scene::Image;
use std::io::Cursor;
use std::path::Path;

/// `round(v * 255)` clamped to the byte range; 0.5 maps to 128.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `img` as an 8-bit RGB PNG, atomically.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let bytes: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let buffer = image::RgbImage::from_raw(w, h, bytes)
        .expect("pixel count matches dimensions by Image invariant");
    let mut encoded = Cursor::new(Vec::new());
    buffer
        .write_to(&mut encoded, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("encoding {}: {e}", path.display())))?;
    atomic_write(path, encoded.get_ref())
}

/// Reads a PNG and returns unit-range pixels, alpha composited onto white.
pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("decoding {}: {e}", path.display())))?;
    let rgba = decoded.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for px in rgba.pixels() {
        let alpha = px[3] as f64 / 255.0;
        for c in 0..3 {
            let v = px[c] as f64 / 255.0;
            pixels.push(alpha * v + (1.0 - alpha));
        }
    }
    Image::new(h, w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.2), 255);
        assert_eq!(quantize(-0.1), 0);
    }

    #[test]
    fn write_then_read_stays_within_quantization_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let pixels: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64) / 59.0).collect();
        let img = Image::new(4, 5, pixels).unwrap();
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.height(), 4);
        assert_eq!(back.width(), 5);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn all_white_image_writes_saturated_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        let img = Image::filled(3, 3, [1.0; 3]).unwrap();
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert!(back.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn alpha_is_composited_onto_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        // One fully transparent pixel, one half-transparent black pixel,
        // one opaque red pixel.
        let mut rgba = image::RgbaImage::new(3, 1);
        rgba.put_pixel(0, 0, image::Rgba([200, 10, 10, 0]));
        rgba.put_pixel(1, 0, image::Rgba([0, 0, 0, 128]));
        rgba.put_pixel(2, 0, image::Rgba([255, 0, 0, 255]));
        rgba.save(&path).unwrap();

        let img = read_png(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
        let half = img.pixel(0, 1);
        let expected = 1.0 - 128.0 / 255.0;
        assert!((half[0] - expected).abs() < 1e-12);
        assert_eq!(img.pixel(0, 2), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn unwritable_and_missing_paths_are_io_errors() {
        let img = Image::filled(2, 2, [0.5; 3]).unwrap();
        let bad = Path::new("/nonexistent-dir-for-this-test/img.png");
        assert!(matches!(write_png(&img, bad), Err(Error::Io { .. })));
        assert!(matches!(
            read_png(Path::new("/nonexistent-dir/missing.png")),
            Err(Error::Io { .. })
        ));
    }
}
