//! `CBR1` float rasters and 8-bit PNG import/export.
//!
//! Raster layout: magic `CBR1`, then width, height and channel count as
//! little-endian `u32`, then `W*H*C` little-endian `f32` values, one plane per
//! channel, rows top to bottom.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CBR1";
const HEADER_LEN: usize = 16;

/// Serializes a `[1, C, H, W]` tensor.
pub fn encode(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 {
        return Err(Error::InvalidArgument(format!("a raster holds one image, got batch {b}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * x.len());
    out.extend_from_slice(MAGIC);
    for d in [w, h, c] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a raster into a `[1, C, H, W]` tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CBR1 raster".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("raster dimensions overflow".into()))?;
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(Error::Format(format!(
            "raster {w}x{h}x{c} needs {} bytes, file has {}",
            HEADER_LEN + 4 * n,
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(&[1, c, h, w], data)
}

pub fn write(path: &Path, x: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(x)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

/// `v / 255` for every byte.
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// `v * 255` rounded half-to-even and clamped to `0..=255`.
pub fn to_u8(v: f32) -> u8 {
    (v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit grey or RGB(A) PNG as `[1, C, H, W]` in `[0, 1]`; alpha is
/// dropped.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, bytes) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    Ok(Tensor::from_fn(&[1, c, h, w], |k| {
        let (ch, p) = (k / (h * w), k % (h * w));
        from_u8(bytes[p * c + ch])
    }))
}

/// Writes a one- or three-channel `[1, C, H, W]` tensor as an 8-bit PNG.
pub fn write_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || !(c == 1 || c == 3) {
        return Err(Error::InvalidArgument(format!("PNG export needs 1 or 3 channels, got {c}")));
    }
    let mut bytes = vec![0u8; h * w * c];
    for (k, &v) in x.data().iter().enumerate() {
        let (ch, p) = (k / (h * w), k % (h * w));
        bytes[p * c + ch] = to_u8(v);
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads either format, chosen by extension.
pub fn read_any(path: &Path) -> Result<Tensor<f32>> {
    if is_png(path) {
        read_png(path)
    } else {
        read(path)
    }
}

pub fn write_any(path: &Path, x: &Tensor<f32>) -> Result<()> {
    if is_png(path) {
        write_png(path, x)
    } else {
        write(path, x)
    }
}
