//! Patch translation: PSNR-voted selection of the initial noise matrix,
//! full-quality DDIM decoding, colorization, and whole-raster
//! translation by tiling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::color::{colorize, whiten, ColorStats};
use crate::diffusion::{ddim_sample, EpsilonModel, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::raster::{
    assemble_mosaic, extract_patch_pairs, reflect_pad_to_multiple, PatchPair, RasterImage,
};
use crate::training::derive_seed;

/// Where the output color statistics come from: the input patch itself,
/// or a co-located patch of an external reference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSource {
    Input,
    External,
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceConfig {
    /// DDIM iterations of the final reverse diffusion.
    pub n_ddim: usize,
    /// Divisor for the coarse candidate runs (iterations = n_ddim / d).
    pub d: usize,
    /// Number of candidate initial noise matrices.
    pub n_noisy: usize,
    pub omega_uncond: f64,
    pub color_source: ColorSource,
    pub patch: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_ddim: 64,
            d: 8,
            n_noisy: 8,
            omega_uncond: 1.0,
            color_source: ColorSource::Input,
            patch: 128,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ddim == 0 || self.d == 0 || self.n_ddim / self.d == 0 {
            return Err(Error::InvalidArgument(format!(
                "n_ddim {} / d {} must be at least 1",
                self.n_ddim, self.d
            )));
        }
        if self.n_noisy == 0 {
            return Err(Error::InvalidArgument("n_noisy must be at least 1".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "patch {} must be even",
                self.patch
            )));
        }
        Ok(())
    }

    fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            omega_uncond: self.omega_uncond,
            ..Default::default()
        }
    }
}

/// Peak signal-to-noise ratio in dB; identical images give +infinity.
pub fn psnr(a: &RasterImage, b: &RasterImage, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let mut mse = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = f64::from(x) - f64::from(y);
        mse += d * d;
    }
    mse /= a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean patchwise PSNR over the exact tiling grid.
pub fn mpsnr(a: &RasterImage, b: &RasterImage, patch: usize, peak: f64) -> Result<f64> {
    let pa = extract_patch_pairs(a, Some(b), patch)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for (pair, other) in &pa {
        acc += psnr(&pair.local, other.as_ref().expect("hr patch"), peak)?;
        count += 1;
    }
    Ok(acc / count as f64)
}

/// Diagnostics from one voted translation.
#[derive(Debug, Clone)]
pub struct VoteReport {
    /// Coarse-run PSNR of each candidate, by candidate index.
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub coarse_runs: usize,
    pub full_runs: usize,
}

/// Gaussian initial-noise matrix for candidate `i` of the patch at
/// `origin`, keyed so any parallel schedule reproduces it.
pub(crate) fn candidate_noise(
    seed: u64,
    origin: (usize, usize),
    candidate: usize,
    n_ch: usize,
    h: usize,
    w: usize,
) -> RasterImage {
    let s = derive_seed(
        seed,
        "eps-t",
        &[origin.0 as u64, origin.1 as u64, candidate as u64],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let data: Vec<f32> = (0..n_ch * h * w)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    RasterImage::new(n_ch, h, w, data).expect("noise finite")
}

/// Translates one patch: whitens the pair, runs `n_noisy` coarse DDIM
/// trajectories from independent noise matrices, keeps the one most
/// consistent with the whitened local patch (highest PSNR, ties to the
/// lowest index), decodes it at full quality and recolors.
pub fn voted_translate_patch<M: EpsilonModel + Sync>(
    model: &M,
    pair: &PatchPair,
    cfg: &InferenceConfig,
    schedule: &NoiseSchedule,
    external_stats: Option<&ColorStats>,
) -> Result<(RasterImage, VoteReport)> {
    cfg.validate()?;
    let (x_local, stats_local) = whiten(&pair.local);
    let (x_global, _) = whiten(&pair.global);
    let x = RasterImage::concat_channels(&[&x_local, &x_global])?;
    let stats = external_stats.unwrap_or(&stats_local);
    let guidance = cfg.guidance();
    let (n_ch, h, w) = pair.local.shape();

    let coarse_steps = (cfg.n_ddim / cfg.d).max(1);
    let candidates: Vec<Result<(RasterImage, f64)>> = (0..cfg.n_noisy)
        .into_par_iter()
        .map(|i| {
            let eps_t = candidate_noise(cfg.seed, pair.origin, i, n_ch, h, w);
            let coarse = ddim_sample(model, &eps_t, &x, coarse_steps, &guidance, schedule)?;
            let score = psnr(&x_local, &coarse, 2.0)?;
            Ok((eps_t, score))
        })
        .collect();

    let mut scores = Vec::with_capacity(cfg.n_noisy);
    let mut best: Option<(usize, f64)> = None;
    let mut noises = Vec::with_capacity(cfg.n_noisy);
    for (i, c) in candidates.into_iter().enumerate() {
        let (eps_t, score) = c?;
        scores.push(score);
        noises.push(eps_t);
        let better = match best {
            None => true,
            Some((_, s)) => score > s,
        };
        if better {
            best = Some((i, score));
        }
    }
    let (chosen, _) = best.expect("n_noisy >= 1");

    let final_whitened = ddim_sample(model, &noises[chosen], &x, cfg.n_ddim, &guidance, schedule)?;
    let out = colorize(&final_whitened, stats)?;
    Ok((
        out,
        VoteReport {
            scores,
            chosen,
            coarse_runs: cfg.n_noisy,
            full_runs: 1,
        },
    ))
}

/// Translates a whole raster: reflect-pad to a multiple of the patch
/// size, translate every patch independently (external color stats come
/// from the co-located window of the reference raster), mosaic, crop.
pub fn translate_raster<M: EpsilonModel + Sync>(
    model: &M,
    lr: &RasterImage,
    cfg: &InferenceConfig,
    schedule: &NoiseSchedule,
    external_color: Option<&RasterImage>,
) -> Result<RasterImage> {
    cfg.validate()?;
    if cfg.color_source == ColorSource::External && external_color.is_none() {
        return Err(Error::InvalidArgument(
            "external color source requested but no reference raster given".into(),
        ));
    }
    if let Some(ext) = external_color {
        if ext.shape() != lr.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", lr.shape()),
                got: format!("{:?}", ext.shape()),
            });
        }
    }

    let (padded, (h, w)) = reflect_pad_to_multiple(lr, cfg.patch);
    let padded_ext = external_color.map(|e| reflect_pad_to_multiple(e, cfg.patch).0);
    let pairs = extract_patch_pairs(&padded, None, cfg.patch)?;

    let tiles: Vec<Result<(RasterImage, (usize, usize))>> = pairs
        .par_iter()
        .map(|(pair, _)| {
            let ext_stats = match (&cfg.color_source, &padded_ext) {
                (ColorSource::External, Some(ext)) => {
                    let win = ext.crop(pair.origin.0, pair.origin.1, cfg.patch, cfg.patch)?;
                    Some(whiten(&win).1)
                }
                _ => None,
            };
            let (img, _) = voted_translate_patch(model, pair, cfg, schedule, ext_stats.as_ref())?;
            Ok((img, pair.origin))
        })
        .collect();
    let tiles: Result<Vec<_>> = tiles.into_iter().collect();
    let mosaic = assemble_mosaic(&tiles?, padded.h(), padded.w())?;
    mosaic.crop(0, 0, h, w)
}
