//! On-disk formats for images and salience maps.
//!
//! Salience maps are stored either as 8-bit grayscale PNG (`s = v / 255`) or
//! in a raw little-endian grid file for lossless round trips:
//!
//! ```text
//! magic   4 bytes "SALR"
//! version u32 (1)
//! height  u32
//! width   u32
//! values  height × width × f32, row-major
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{Provenance, SalienceMap};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::tensor::Tensor;

const RAW_MAGIC: &[u8; 4] = b"SALR";
const RAW_VERSION: u32 = 1;
pub const RAW_EXTENSION: &str = "salr";

pub fn encode_raw(map: &SalienceMap) -> Vec<u8> {
    let (h, w) = map.resolution();
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.grid() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8], provenance: Provenance, path: &Path) -> Result<SalienceMap> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(path, "bad salience header magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != RAW_VERSION as usize {
        return Err(Error::format(path, format!("unsupported salience version {}", word(4))));
    }
    let (h, w) = (word(8), word(12));
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::format(path, format!("expected {h}x{w} grid, file length {}", bytes.len())));
    }
    let grid = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SalienceMap::new(h, w, grid, provenance).map_err(|e| Error::format(path, e.to_string()))
}

/// Rounds every value to the nearest `f32`, matching what the raw format stores.
pub fn quantize_f32(map: &SalienceMap) -> SalienceMap {
    let grid = map.grid().iter().map(|v| *v as f32 as f64).collect();
    let (h, w) = map.resolution();
    SalienceMap::new(h, w, grid, map.provenance()).expect("rounding keeps [0,1]")
}

pub fn write_raw(map: &SalienceMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_raw(map))
}

pub fn read_raw(path: &Path, provenance: Provenance) -> Result<SalienceMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, provenance, path)
}

pub fn encode_png_salience(map: &SalienceMap) -> Result<Vec<u8>> {
    let (h, w) = map.resolution();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map.get(y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    encode_png(image::DynamicImage::ImageLuma8(img))
}

pub fn read_png_salience(path: &Path, provenance: Provenance) -> Result<SalienceMap> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let grid = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    SalienceMap::new(h as usize, w as usize, grid, provenance).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a salience file, picking the format from the extension.
pub fn read_salience(path: &Path, provenance: Provenance) -> Result<SalienceMap> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "salience file not found"),
        ));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXTENSION) => read_raw(path, provenance),
        _ => read_png_salience(path, provenance),
    }
}

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::format("<png>", e.to_string()))?;
    Ok(buf.into_inner())
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes a 1- or 3-channel image tensor as 8-bit PNG.
pub fn encode_png_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.shape();
    let dynamic = match c {
        1 => image::DynamicImage::ImageLuma8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u8(image.get(0, y as usize, x as usize))])
        })),
        3 => {
            let rgb: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([to_u8(image.get(0, y, x)), to_u8(image.get(1, y, x)), to_u8(image.get(2, y, x))])
            });
            image::DynamicImage::ImageRgb8(rgb)
        }
        other => return Err(Error::Unsupported(format!("{other}-channel images cannot be written as PNG"))),
    };
    encode_png(dynamic)
}

/// Loads an 8-bit grayscale or RGB PNG into a tensor with values `v / 255`.
pub fn read_png_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            Ok(Tensor::from_vec(1, h, w, g.pixels().map(|p| p.0[0] as f64 / 255.0).collect()))
        }
        _ => {
            let rgb = img.to_rgb8();
            let mut t = Tensor::zeros(3, h, w);
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    t.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
                }
            }
            Ok(t)
        }
    }
}
