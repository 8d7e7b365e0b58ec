//! Color standardization: whitening strips per-channel means and the
//! global value range from an image, coloring reattaches them.
//!
//! The diffusion model only ever sees whitened data in [-1, 1], so it
//! cannot be confused by the absolute tonality of a patch. The removed
//! statistics travel alongside as [`ColorStats`] and are reapplied to
//! generated outputs.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Statistics removed by whitening: per-channel means `m1`, the global
/// minimum after mean removal `m2`, and the global maximum after the
/// `m2` shift `m3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorStats {
    pub m1: Vec<f32>,
    pub m2: f32,
    pub m3: f32,
}

impl ColorStats {
    pub fn is_finite(&self) -> bool {
        self.m1.iter().all(|v| v.is_finite()) && self.m2.is_finite() && self.m3.is_finite()
    }
}

/// Per-channel mean in f64 accumulation.
fn channel_mean(plane: &[f32]) -> f32 {
    let sum: f64 = plane.iter().map(|&v| f64::from(v)).sum();
    (sum / plane.len() as f64) as f32
}

/// Removes per-channel means and rescales the global range onto [-1, 1].
///
/// Degenerate inputs (every channel constant) whiten to all zeros with
/// `m2 = 0`, `m3 = 0`; no division happens on that path.
pub fn whiten(image: &RasterImage) -> (RasterImage, ColorStats) {
    let (n_ch, h, w) = image.shape();
    let mut m1 = Vec::with_capacity(n_ch);
    let mut centered = vec![0f32; n_ch * h * w];
    for c in 0..n_ch {
        let mean = channel_mean(image.channel(c));
        m1.push(mean);
        let plane = image.channel(c);
        let out = &mut centered[c * h * w..(c + 1) * h * w];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o = v - mean;
        }
    }

    let m2 = centered.iter().copied().fold(f32::INFINITY, f32::min);
    for v in centered.iter_mut() {
        *v -= m2;
    }
    let m3 = centered.iter().copied().fold(f32::NEG_INFINITY, f32::max);

    if m3 <= 0.0 {
        // constant per channel: nothing left to normalize
        return (
            RasterImage::zeros(n_ch, h, w),
            ColorStats {
                m1,
                m2: 0.0,
                m3: 0.0,
            },
        );
    }

    for v in centered.iter_mut() {
        *v = 2.0 * (*v / m3 - 0.5);
    }
    let whitened = RasterImage::new(n_ch, h, w, centered).expect("whitened samples finite");
    (whitened, ColorStats { m1, m2, m3 })
}

/// Reattaches color statistics to a whitened (or generated) image: the
/// input's full dynamic range is mapped onto `[m2 + m1[c], m2 + m3 + m1[c]]`
/// per channel.
///
/// A constant input cannot be range-normalized; it colorizes to the
/// constant `m2 + m1[c]` per channel, as does `m3 = 0`.
pub fn colorize(whitened: &RasterImage, stats: &ColorStats) -> Result<RasterImage> {
    let (n_ch, h, w) = whitened.shape();
    if stats.m1.len() != n_ch {
        return Err(Error::ShapeMismatch {
            expected: format!("{n_ch} channel means"),
            got: format!("{}", stats.m1.len()),
        });
    }
    if !stats.is_finite() {
        return Err(Error::InvalidArgument("non-finite color stats".into()));
    }

    let lo = whitened
        .data()
        .iter()
        .copied()
        .fold(f32::INFINITY, f32::min);
    let hi = whitened
        .data()
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;

    let mut out = vec![0f32; n_ch * h * w];
    for c in 0..n_ch {
        let bias = stats.m2 + stats.m1[c];
        let plane = whitened.channel(c);
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        if range <= 0.0 || stats.m3 == 0.0 {
            dst.fill(bias);
        } else {
            for (o, &v) in dst.iter_mut().zip(plane) {
                *o = ((v - lo) / range) * stats.m3 + bias;
            }
        }
    }
    RasterImage::new(n_ch, h, w, out)
}
