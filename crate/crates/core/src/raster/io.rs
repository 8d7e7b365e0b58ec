//! Raster file formats: the bit-exact `.rsr` container and 8-bit PNG
//! import/export for visualization.
//!
//! `.rsr` layout: magic `RSR1`, then little-endian u32 `n_ch`, `h`, `w`,
//! then `n_ch * h * w` little-endian f32 samples, channel-major
//! row-major. Every f32 bit pattern round-trips unchanged.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub const RSR_MAGIC: [u8; 4] = *b"RSR1";

/// Largest per-axis extent accepted when reading; guards against
/// corrupt headers requesting absurd allocations.
const MAX_DIM: u64 = 1 << 24;

pub fn write_rsr(path: impl AsRef<Path>, image: &RasterImage) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + image.data().len() * 4);
    buf.extend_from_slice(&RSR_MAGIC);
    buf.extend_from_slice(&(image.n_ch() as u32).to_le_bytes());
    buf.extend_from_slice(&(image.h() as u32).to_le_bytes());
    buf.extend_from_slice(&(image.w() as u32).to_le_bytes());
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_rsr(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 16,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != RSR_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: RSR_MAGIC,
            found: magic,
        });
    }
    let n_ch = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    if n_ch == 0 || h == 0 || w == 0 || n_ch > MAX_DIM || h > MAX_DIM || w > MAX_DIM {
        return Err(Error::DimensionOverflow { n_ch, h, w });
    }
    let count = n_ch
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or(Error::DimensionOverflow { n_ch, h, w })?;
    let payload = count
        .checked_mul(4)
        .ok_or(Error::DimensionOverflow { n_ch, h, w })?;
    let found = (bytes.len() - 16) as u64;
    if found != payload {
        return Err(Error::Truncated {
            path: path.into(),
            expected: payload,
            found,
        });
    }
    let mut data = Vec::with_capacity(count as usize);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    RasterImage::new(n_ch as usize, h as usize, w as usize, data)
}

/// Maps a sample from [-1, 1] to an 8-bit code, half-up rounding.
#[inline]
fn to_byte(v: f32) -> u8 {
    let unit = (f64::from(v).clamp(-1.0, 1.0) + 1.0) * 0.5;
    (unit * 255.0 + 0.5).floor() as u8
}

/// Exports a 1- or 3-channel raster to PNG, mapping [-1, 1] linearly
/// onto 0..255.
pub fn write_png(path: impl AsRef<Path>, image: &RasterImage) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (image.h() as u32, image.w() as u32);
    match image.n_ch() {
        1 => {
            let pixels: Vec<u8> = image.channel(0).iter().map(|&v| to_byte(v)).collect();
            let buf = image::GrayImage::from_raw(w, h, pixels)
                .ok_or_else(|| Error::Png("buffer construction failed".into()))?;
            buf.save(path).map_err(|e| Error::Png(e.to_string()))
        }
        3 => {
            let mut pixels = Vec::with_capacity(image.data().len());
            for y in 0..image.h() {
                for x in 0..image.w() {
                    for c in 0..3 {
                        pixels.push(to_byte(image.get(c, y, x)));
                    }
                }
            }
            let buf = image::RgbImage::from_raw(w, h, pixels)
                .ok_or_else(|| Error::Png("buffer construction failed".into()))?;
            buf.save(path).map_err(|e| Error::Png(e.to_string()))
        }
        n => Err(Error::InvalidArgument(format!(
            "png export supports 1 or 3 channels, got {n}"
        ))),
    }
}

/// Imports an 8-bit PNG as a raster in [-1, 1] (inverse of the export map
/// up to quantization).
pub fn read_png(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Png(e.to_string()))?;
    let from_byte = |b: u8| (f32::from(b) / 255.0) * 2.0 - 1.0;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data: Vec<f32> = g.into_raw().into_iter().map(from_byte).collect();
            RasterImage::new(1, h as usize, w as usize, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (h, w) = (h as usize, w as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0.0f32; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = from_byte(raw[(y * w + x) * 3 + c]);
                    }
                }
            }
            RasterImage::new(3, h, w, data)
        }
    }
}
