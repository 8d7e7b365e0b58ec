//! Layered run configuration: built-in defaults, then `key = value`
//! lines from an optional config file, then command-line flags. The
//! effective configuration is echoed to a sidecar file so any run can
//! be reproduced from its outputs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use terradiff::inference::ColorSource;
use terradiff::nn::DenoiserConfig;
use terradiff::synth::{ChangeSpec, SceneSpec};
use terradiff::training::TrainingConfig;

/// Union of every tunable across the pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub t_steps: usize,
    pub patch: usize,

    // training
    pub p_uncond: f64,
    pub huber_delta: f64,
    pub lambda_consist: f64,
    pub eps_consist: usize,
    pub n_consist: usize,
    pub gamma_snr: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub swa_start: u64,

    // denoiser architecture
    pub in_channels: usize,
    pub base_width: usize,
    pub mid_width: usize,
    pub freq_features: usize,

    // inference
    pub n_ddim: usize,
    pub d: usize,
    pub n_noisy: usize,
    pub omega_uncond: f64,
    pub color_source: ColorSource,

    // change detection
    pub omega: f64,
    pub w_gauss: usize,
    pub w_otsu: usize,
    pub e_max: f64,
    pub n_min: usize,
    pub otsu_bins: usize,

    // synthetic generator
    pub size: usize,
    pub count: usize,
    pub n_rect: usize,
    pub n_line: usize,
    pub n_ellipse: usize,
    pub noise_octaves: usize,
    pub color_shift: f32,
    pub blur_factor: usize,
    pub sensor_noise: f32,
    pub changes: usize,
    pub change_removed: usize,
    pub change_min_side: usize,
    pub change_max_side: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_steps: 1024,
            patch: 128,
            p_uncond: 0.1,
            huber_delta: 0.5,
            lambda_consist: 0.1,
            eps_consist: 10,
            n_consist: 1,
            gamma_snr: 5.0,
            lr: 1e-4,
            batch: 4,
            epochs: 31,
            swa_start: 10,
            in_channels: 3,
            base_width: 32,
            mid_width: 64,
            freq_features: 16,
            n_ddim: 64,
            d: 8,
            n_noisy: 8,
            omega_uncond: 1.0,
            color_source: ColorSource::Input,
            omega: 0.05,
            w_gauss: 11,
            w_otsu: 1023,
            e_max: 5.0,
            n_min: 48,
            otsu_bins: 256,
            size: 128,
            count: 20,
            n_rect: 8,
            n_line: 3,
            n_ellipse: 4,
            noise_octaves: 3,
            color_shift: 0.3,
            blur_factor: 3,
            sensor_noise: 0.01,
            changes: 0,
            change_removed: 0,
            change_min_side: 24,
            change_max_side: 48,
        }
    }
}

fn color_source_from_str(s: &str) -> Result<ColorSource> {
    match s {
        "input" => Ok(ColorSource::Input),
        "external" => Ok(ColorSource::External),
        other => bail!("color_source must be 'input' or 'external', got {other:?}"),
    }
}

fn color_source_to_str(c: ColorSource) -> &'static str {
    match c {
        ColorSource::Input => "input",
        ColorSource::External => "external",
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            ($field:ident) => {{
                self.$field = value
                    .parse()
                    .with_context(|| format!("bad value {value:?} for key {key:?}"))?;
            }};
        }
        match key {
            "seed" => parse!(seed),
            "t_steps" => parse!(t_steps),
            "patch" => parse!(patch),
            "p_uncond" => parse!(p_uncond),
            "huber_delta" => parse!(huber_delta),
            "lambda_consist" => parse!(lambda_consist),
            "eps_consist" => parse!(eps_consist),
            "n_consist" => parse!(n_consist),
            "gamma_snr" => parse!(gamma_snr),
            "lr" => parse!(lr),
            "batch" => parse!(batch),
            "epochs" => parse!(epochs),
            "swa_start" => parse!(swa_start),
            "in_channels" => parse!(in_channels),
            "base_width" => parse!(base_width),
            "mid_width" => parse!(mid_width),
            "freq_features" => parse!(freq_features),
            "n_ddim" => parse!(n_ddim),
            "d" => parse!(d),
            "n_noisy" => parse!(n_noisy),
            "omega_uncond" => parse!(omega_uncond),
            "color_source" => self.color_source = color_source_from_str(value)?,
            "omega" => parse!(omega),
            "w_gauss" => parse!(w_gauss),
            "w_otsu" => parse!(w_otsu),
            "e_max" => parse!(e_max),
            "n_min" => parse!(n_min),
            "otsu_bins" => parse!(otsu_bins),
            "size" => parse!(size),
            "count" => parse!(count),
            "n_rect" => parse!(n_rect),
            "n_line" => parse!(n_line),
            "n_ellipse" => parse!(n_ellipse),
            "noise_octaves" => parse!(noise_octaves),
            "color_shift" => parse!(color_shift),
            "blur_factor" => parse!(blur_factor),
            "sensor_noise" => parse!(sensor_noise),
            "changes" => parse!(changes),
            "change_removed" => parse!(change_removed),
            "change_min_side" => parse!(change_min_side),
            "change_max_side" => parse!(change_max_side),
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Loads `key = value` lines (with `#` comments) over the defaults.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key = value", lineno + 1))?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    /// Serializes the effective configuration; parsing this text back
    /// reproduces the same config.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "t_steps = {}", self.t_steps);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "p_uncond = {}", self.p_uncond);
        let _ = writeln!(s, "huber_delta = {}", self.huber_delta);
        let _ = writeln!(s, "lambda_consist = {}", self.lambda_consist);
        let _ = writeln!(s, "eps_consist = {}", self.eps_consist);
        let _ = writeln!(s, "n_consist = {}", self.n_consist);
        let _ = writeln!(s, "gamma_snr = {}", self.gamma_snr);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "swa_start = {}", self.swa_start);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "base_width = {}", self.base_width);
        let _ = writeln!(s, "mid_width = {}", self.mid_width);
        let _ = writeln!(s, "freq_features = {}", self.freq_features);
        let _ = writeln!(s, "n_ddim = {}", self.n_ddim);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "n_noisy = {}", self.n_noisy);
        let _ = writeln!(s, "omega_uncond = {}", self.omega_uncond);
        let _ = writeln!(
            s,
            "color_source = {}",
            color_source_to_str(self.color_source)
        );
        let _ = writeln!(s, "omega = {}", self.omega);
        let _ = writeln!(s, "w_gauss = {}", self.w_gauss);
        let _ = writeln!(s, "w_otsu = {}", self.w_otsu);
        let _ = writeln!(s, "e_max = {}", self.e_max);
        let _ = writeln!(s, "n_min = {}", self.n_min);
        let _ = writeln!(s, "otsu_bins = {}", self.otsu_bins);
        let _ = writeln!(s, "size = {}", self.size);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "n_rect = {}", self.n_rect);
        let _ = writeln!(s, "n_line = {}", self.n_line);
        let _ = writeln!(s, "n_ellipse = {}", self.n_ellipse);
        let _ = writeln!(s, "noise_octaves = {}", self.noise_octaves);
        let _ = writeln!(s, "color_shift = {}", self.color_shift);
        let _ = writeln!(s, "blur_factor = {}", self.blur_factor);
        let _ = writeln!(s, "sensor_noise = {}", self.sensor_noise);
        let _ = writeln!(s, "changes = {}", self.changes);
        let _ = writeln!(s, "change_removed = {}", self.change_removed);
        let _ = writeln!(s, "change_min_side = {}", self.change_min_side);
        let _ = writeln!(s, "change_max_side = {}", self.change_max_side);
        s
    }

    /// Range checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            bail!("omega {} outside [0, 1]", self.omega);
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            bail!("p_uncond {} outside [0, 1]", self.p_uncond);
        }
        if self.t_steps < 2 {
            bail!("t_steps must be at least 2");
        }
        if self.patch == 0 || !self.patch.is_multiple_of(2) {
            bail!("patch must be even and positive");
        }
        if self.n_ddim == 0 || self.d == 0 || self.n_ddim / self.d == 0 {
            bail!("n_ddim / d must be at least 1");
        }
        if self.n_noisy == 0 {
            bail!("n_noisy must be at least 1");
        }
        if self.w_gauss.is_multiple_of(2) || self.w_otsu.is_multiple_of(2) {
            bail!("w_gauss and w_otsu must be odd");
        }
        if self.e_max <= 0.0 || self.n_min == 0 {
            bail!("e_max must be positive and n_min at least 1");
        }
        if self.change_max_side < self.change_min_side || self.change_min_side == 0 {
            bail!("bad change rectangle side range");
        }
        if self.size < 8 {
            bail!("scene size must be at least 8");
        }
        Ok(())
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            p_uncond: self.p_uncond,
            huber_delta: self.huber_delta,
            lambda_consist: self.lambda_consist,
            eps_consist: self.eps_consist,
            n_consist: self.n_consist,
            gamma_snr: self.gamma_snr,
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            swa_start: self.swa_start,
            seed: self.seed,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: self.in_channels,
            base_width: self.base_width,
            mid_width: self.mid_width,
            freq_features: self.freq_features,
        }
    }

    pub fn inference(&self) -> terradiff::inference::InferenceConfig {
        terradiff::inference::InferenceConfig {
            n_ddim: self.n_ddim,
            d: self.d,
            n_noisy: self.n_noisy,
            omega_uncond: self.omega_uncond,
            color_source: self.color_source,
            patch: self.patch,
            seed: self.seed,
        }
    }

    pub fn changedet(&self) -> terradiff::changedet::ChangeDetConfig {
        terradiff::changedet::ChangeDetConfig {
            omega: self.omega,
            w_gauss: self.w_gauss,
            w_otsu: self.w_otsu,
            e_max: self.e_max,
            n_min: self.n_min,
            otsu_bins: self.otsu_bins,
        }
    }

    pub fn scene(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            size: self.size,
            n_rect: self.n_rect,
            n_line: self.n_line,
            n_ellipse: self.n_ellipse,
            noise_octaves: self.noise_octaves,
            color_shift: self.color_shift,
            blur_factor: self.blur_factor,
            sensor_noise: self.sensor_noise,
            changes: ChangeSpec {
                added_rects: self.changes,
                removed_objects: self.change_removed,
                min_side: self.change_min_side,
                max_side: self.change_max_side,
            },
        }
    }

    /// Writes the effective-config sidecar next to an output artifact.
    pub fn echo_sidecar(&self, primary_output: &Path) -> Result<()> {
        let mut name = primary_output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        name.push_str(".cfg");
        let path = primary_output.with_file_name(name);
        std::fs::write(&path, self.to_kv_string())
            .with_context(|| format!("writing config echo {}", path.display()))?;
        Ok(())
    }
}
