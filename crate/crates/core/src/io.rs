//! 8-bit PNG input and output for images and masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::scalar::Scalar;

/// `round(v * 255)` clamped to `[0, 255]`.
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Interleaved RGB bytes of `image`.
pub fn image_to_rgb8<T: Scalar>(image: &Image<T>) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out.push(to_u8(image.get(y, x, c)));
            }
        }
    }
    out
}

pub fn image_from_rgb8<T: Scalar>(height: usize, width: usize, rgb: &[u8]) -> Result<Image<T>> {
    if rgb.len() != height * width * CHANNELS {
        return Err(Error::Format(format!(
            "expected {} RGB bytes, got {}",
            height * width * CHANNELS,
            rgb.len()
        )));
    }
    Ok(Image::from_fn(height, width, |y, x, c| {
        T::lit(rgb[(y * width + x) * CHANNELS + c] as f64 / 255.0)
    }))
}

/// Rounds a cloaked image to 8 bits so that `|out8 - original8| <= eps`
/// holds in integers.
pub fn quantize_within_budget<T: Scalar>(cloaked: &Image<T>, original: &Image<T>, eps: f64) -> Image<T> {
    let eps = eps.floor();
    let mut out = cloaked.clone();
    for (v, &o) in out.data_mut().iter_mut().zip(original.data()) {
        let o8 = to_u8(o) as f64;
        let q = (v.as_f64() * 255.0).round().clamp(o8 - eps, o8 + eps).clamp(0.0, 255.0);
        *v = T::lit(q / 255.0);
    }
    out
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        bytes: buf,
    })
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Reads a PNG as RGB in `[0, 1]`. Gray is replicated, alpha is dropped.
pub fn read_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let d = decode(path)?;
    let per = match d.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("unexpanded palette image".into())),
    };
    let rgb: Vec<u8> = d
        .bytes
        .chunks_exact(per)
        .flat_map(|px| if per < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] })
        .collect();
    image_from_rgb8(d.height, d.width, &rgb)
}

pub fn write_png<T: Scalar>(image: &Image<T>, path: &Path) -> Result<()> {
    encode(path, image.width(), image.height(), png::ColorType::Rgb, &image_to_rgb8(image))
}

/// Reads a mask PNG; a pixel is foreground when its first channel is above 127.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let d = decode(path)?;
    let per = d.bytes.len() / (d.width * d.height).max(1);
    let bits: Vec<bool> = d.bytes.chunks_exact(per.max(1)).map(|px| px[0] > 127).collect();
    Ok(Mask::from_fn(d.height, d.width, |y, x| bits[y * d.width + x]))
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(path, mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let img = crate::scene::scene_image::<f64>(20);
        write_png(&img, &path).unwrap();
        assert_eq!(read_png::<f64>(&path).unwrap(), img);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Mask::checkerboard(9, 13);
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
        // a mask read as an image is black and white
        let img = read_png::<f64>(&path).unwrap();
        assert_eq!(img.get(0, 0, 2), 1.0);
        assert_eq!(img.get(0, 1, 0), 0.0);
    }

    #[test]
    fn quantization_respects_integer_budget() {
        let orig = Image::from_fn(4, 4, |y, x, c| ((y * 4 + x) * 3 + c) as f64 * 5.0 / 255.0);
        let mut cloaked = orig.clone();
        for (i, v) in cloaked.data_mut().iter_mut().enumerate() {
            *v = (*v + if i % 2 == 0 { 8.49 } else { -8.6 } / 255.0).clamp(0.0, 1.0);
        }
        let q = quantize_within_budget(&cloaked, &orig, 8.0);
        for (&a, &b) in q.data().iter().zip(orig.data()) {
            let (a8, b8) = (to_u8(a) as i32, to_u8(b) as i32);
            assert!((a8 - b8).abs() <= 8);
            assert_eq!(a * 255.0, (a * 255.0).round());
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_png::<f64>(&path), Err(Error::Format(_))));
        assert!(matches!(read_png::<f64>(&dir.path().join("missing.png")), Err(Error::Io(_))));
    }
}
