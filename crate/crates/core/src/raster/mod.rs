//! Planar multi-channel float image container and the pixel-level
//! machinery built on top of it: bit-exact file I/O, bicubic
//! resampling and patch tiling with local+global context windows.

mod io;
mod patch;
mod resample;

pub use io::{read_png, read_rsr, write_png, write_rsr, RSR_MAGIC};
pub use patch::{
    assemble_mosaic, extract_patch_pairs, reflect_pad_to_multiple, PatchGrid, PatchPair,
};
pub use resample::bicubic_resize;

use crate::error::{Error, Result};

/// Planar image: `n_ch` channels of `h x w` f32 samples, channel-major
/// then row-major. Samples are always finite; the constructors enforce it.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    n_ch: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl RasterImage {
    /// Builds an image from raw samples, validating the container invariants.
    pub fn new(n_ch: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if n_ch == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dimensions must be positive, got {n_ch}x{h}x{w}"
            )));
        }
        let expected =
            n_ch.checked_mul(h)
                .and_then(|v| v.checked_mul(w))
                .ok_or(Error::DimensionOverflow {
                    n_ch: n_ch as u64,
                    h: h as u64,
                    w: w as u64,
                })?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} samples for {n_ch}x{h}x{w}"),
                got: format!("{}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { n_ch, h, w, data })
    }

    /// Constant-valued image.
    pub fn filled(n_ch: usize, h: usize, w: usize, value: f32) -> Self {
        Self::new(n_ch, h, w, vec![value; n_ch * h * w]).expect("finite constant")
    }

    pub fn zeros(n_ch: usize, h: usize, w: usize) -> Self {
        Self::filled(n_ch, h, w, 0.0)
    }

    pub fn n_ch(&self) -> usize {
        self.n_ch
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// (n_ch, h, w) triple, handy for shape checks.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_ch, self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.h * self.w;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.h * self.w;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Reads a pixel with reflect boundary handling on both axes.
    #[inline]
    pub fn get_reflect(&self, c: usize, y: isize, x: isize) -> f32 {
        let ry = reflect_index(y, self.h);
        let rx = reflect_index(x, self.w);
        self.get(c, ry, rx)
    }

    /// Stacks images channel-wise; all inputs must share h and w.
    pub fn concat_channels(parts: &[&RasterImage]) -> Result<RasterImage> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero images".into()))?;
        let (h, w) = (first.h, first.w);
        let mut n_ch = 0;
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("{h}x{w}"),
                    got: format!("{}x{}", p.h, p.w),
                });
            }
            n_ch += p.n_ch;
        }
        let mut data = Vec::with_capacity(n_ch * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        RasterImage::new(n_ch, h, w, data)
    }

    /// Copies a window with reflect padding wherever it overhangs the raster.
    pub fn window_reflect(&self, top: isize, left: isize, wh: usize, ww: usize) -> RasterImage {
        let mut out = RasterImage::zeros(self.n_ch, wh, ww);
        for c in 0..self.n_ch {
            for y in 0..wh {
                let sy = reflect_index(top + y as isize, self.h);
                for x in 0..ww {
                    let sx = reflect_index(left + x as isize, self.w);
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    /// Crops a fully in-bounds window.
    pub fn crop(&self, top: usize, left: usize, wh: usize, ww: usize) -> Result<RasterImage> {
        if top + wh > self.h || left + ww > self.w {
            return Err(Error::InvalidArgument(format!(
                "crop {wh}x{ww}@({top},{left}) exceeds raster {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(self.n_ch * wh * ww);
        for c in 0..self.n_ch {
            for y in 0..wh {
                let row = (c * self.h + top + y) * self.w + left;
                data.extend_from_slice(&self.data[row..row + ww]);
            }
        }
        RasterImage::new(self.n_ch, wh, ww, data)
    }
}

/// Folds an arbitrary signed index into `[0, n)` by mirroring about the
/// edges without repeating them: for n = 4 the extension reads
/// `... 2 1 | 0 1 2 3 | 2 1 0 1 ...`
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
