//! Patch tiling: non-overlapping grids, local+global conditioning
//! windows, and exact mosaic reassembly.
//!
//! The global context of a patch is the 2h x 2w window whose north-west
//! quadrant is the patch itself, downsampled back to h x w, so the model
//! sees the patch area plus three equally sized companion regions.
//! Windows overhanging the raster are reflect-padded.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::raster::{bicubic_resize, RasterImage};

/// A local patch plus its downsampled 2x context window.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub local: RasterImage,
    pub global: RasterImage,
    /// (row, col) of the local patch in the source raster.
    pub origin: (usize, usize),
}

/// Non-overlapping tiling of an `h x w` frame by square patches.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// Exact cover at stride = patch size; dimensions must divide evenly.
    pub fn new(h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        if h < patch || w < patch {
            return Err(Error::InvalidArgument(format!(
                "raster {h}x{w} smaller than patch {patch}"
            )));
        }
        if !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(Error::InvalidArgument(format!(
                "raster {h}x{w} not tileable by {patch} at stride {patch}"
            )));
        }
        let mut origins = Vec::with_capacity((h / patch) * (w / patch));
        for r in (0..h).step_by(patch) {
            for c in (0..w).step_by(patch) {
                origins.push((r, c));
            }
        }
        Ok(Self {
            patch,
            stride: patch,
            origins,
        })
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }
}

/// Cuts a raster into patch pairs (local + downsampled 2x context).
/// When an HR raster is supplied, the co-located HR window is returned
/// alongside each pair.
pub fn extract_patch_pairs(
    lr: &RasterImage,
    hr: Option<&RasterImage>,
    patch: usize,
) -> Result<Vec<(PatchPair, Option<RasterImage>)>> {
    if let Some(hr) = hr {
        if hr.shape() != lr.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", lr.shape()),
                got: format!("{:?}", hr.shape()),
            });
        }
    }
    let grid = PatchGrid::new(lr.h(), lr.w(), patch)?;
    let mut out = Vec::with_capacity(grid.origins().len());
    for &(r, c) in grid.origins() {
        let local = lr.crop(r, c, patch, patch)?;
        let context = lr.window_reflect(r as isize, c as isize, 2 * patch, 2 * patch);
        let global = bicubic_resize(&context, patch, patch)?;
        let hr_patch = match hr {
            Some(hr) => Some(hr.crop(r, c, patch, patch)?),
            None => None,
        };
        out.push((
            PatchPair {
                local,
                global,
                origin: (r, c),
            },
            hr_patch,
        ));
    }
    Ok(out)
}

/// Reassembles a full frame from non-overlapping tiles. Every pixel must
/// be covered exactly once.
pub fn assemble_mosaic(
    patches: &[(RasterImage, (usize, usize))],
    h: usize,
    w: usize,
) -> Result<RasterImage> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Tiling("no patches supplied".into()))?;
    let patch = first.0.h();
    let n_ch = first.0.n_ch();
    let grid = PatchGrid::new(h, w, patch).map_err(|e| Error::Tiling(e.to_string()))?;

    let expected: BTreeSet<(usize, usize)> = grid.origins().iter().copied().collect();
    let mut seen = BTreeSet::new();
    for (img, origin) in patches {
        if img.shape() != (n_ch, patch, patch) {
            return Err(Error::Tiling(format!(
                "tile at {origin:?} has shape {:?}, expected {:?}",
                img.shape(),
                (n_ch, patch, patch)
            )));
        }
        if !expected.contains(origin) {
            return Err(Error::Tiling(format!(
                "tile origin {origin:?} off the grid"
            )));
        }
        if !seen.insert(*origin) {
            return Err(Error::Tiling(format!(
                "tile origin {origin:?} supplied twice"
            )));
        }
    }
    if seen.len() != expected.len() {
        let missing: Vec<_> = expected.difference(&seen).take(4).collect();
        return Err(Error::Tiling(format!("uncovered origins: {missing:?}")));
    }

    let mut out = RasterImage::zeros(n_ch, h, w);
    for (img, &(r, c)) in patches.iter().map(|(i, o)| (i, o)) {
        for ch in 0..n_ch {
            for y in 0..patch {
                for x in 0..patch {
                    out.set(ch, r + y, c + x, img.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Reflect-pads on the bottom/right so both dimensions become multiples
/// of `m`. Returns the padded raster and the original (h, w).
pub fn reflect_pad_to_multiple(image: &RasterImage, m: usize) -> (RasterImage, (usize, usize)) {
    let (h, w) = (image.h(), image.w());
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return (image.clone(), (h, w));
    }
    (image.window_reflect(0, 0, ph, pw), (h, w))
}
