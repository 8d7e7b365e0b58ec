//! Command-line front end: dataset generation, training, raster
//! translation, change detection, ROC sweeps and PSNR reports.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use terradiff::changedet::{
    detect_changes, evaluate_dr_far, overlay_image, roc_sweep, roc_to_csv, Mask,
};
use terradiff::diffusion::NoiseSchedule;
use terradiff::inference::{mpsnr, psnr, translate_raster, ColorSource};
use terradiff::nn::{load_checkpoint, save_checkpoint, Denoiser};
use terradiff::raster::{extract_patch_pairs, read_rsr, write_png, write_rsr};
use terradiff::synth::{
    apply_changes, generate_pair, read_manifest, write_manifest, ManifestEntry, Role,
};
use terradiff::training::{curve_to_csv, derive_seed, train, TrainSample};

#[derive(Parser)]
#[command(
    name = "terradiff",
    version,
    about = "Diffusion image translation and change detection"
)]
struct Cli {
    /// Optional key = value config file (flags override its values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic rasters plus a manifest.
    SynthGen(SynthGenArgs),
    /// Train the denoiser on a generated dataset.
    Train(TrainArgs),
    /// Translate an LR raster to the HR domain with a trained model.
    Translate(TranslateArgs),
    /// Detect changes between a co-registered pre/post pair.
    ChangeDetect(ChangeDetectArgs),
    /// Sweep the global threshold and emit the ROC table.
    Roc(RocArgs),
    /// PSNR / mean patchwise PSNR between two rasters.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Rectangles inserted into each post-event scene (0 = no change data).
    #[arg(long)]
    changes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest produced by synth-gen.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_consist: Option<f64>,
    #[arg(long)]
    swa_start: Option<u64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    mid_width: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also export an 8-bit preview.
    #[arg(long)]
    out_png: Option<PathBuf>,
    #[arg(long)]
    n_noisy: Option<usize>,
    #[arg(long)]
    n_ddim: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    omega_uncond: Option<f64>,
    /// Where output colors come from: input | external.
    #[arg(long)]
    color_source: Option<String>,
    /// Reference raster for --color-source external.
    #[arg(long)]
    external: Option<PathBuf>,
}

#[derive(Args)]
struct ChangeDetectArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    #[arg(long)]
    omega: Option<f64>,
    /// Truth mask raster; enables DR/FAR reporting and the overlay.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out_map: PathBuf,
    #[arg(long)]
    out_overlay: Option<PathBuf>,
    #[arg(long)]
    w_otsu: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
}

#[derive(Args)]
struct RocArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Emit truth overlays at omega = 0.0, 0.1, ... into this directory.
    #[arg(long)]
    out_overlay_dir: Option<PathBuf>,
    #[arg(long)]
    w_otsu: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    patch: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn base_config(config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.load_file(path)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = base_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::SynthGen(args) => synth_gen(cfg, args),
        Command::Train(args) => run_train(cfg, args),
        Command::Translate(args) => run_translate(cfg, args),
        Command::ChangeDetect(args) => run_change_detect(cfg, args),
        Command::Roc(args) => run_roc(cfg, args),
        Command::Metrics(args) => run_metrics(cfg, args),
    }
}

macro_rules! override_field {
    ($cfg:expr, $args:expr, $($field:ident),+) => {
        $(if let Some(v) = $args.$field {
            $cfg.$field = v;
        })+
    };
}

fn synth_gen(mut cfg: RunConfig, args: SynthGenArgs) -> Result<()> {
    override_field!(cfg, args, count, size, changes);
    cfg.validate()?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let sample_seed = derive_seed(cfg.seed, "sample", &[i as u64]);
        let spec = cfg.scene(sample_seed);
        let (hr, lr) = generate_pair(&spec)?;
        let hr_name = format!("sample_{i:04}_hr.rsr");
        let lr_name = format!("sample_{i:04}_lr.rsr");
        write_rsr(args.out_dir.join(&hr_name), &hr)?;
        write_rsr(args.out_dir.join(&lr_name), &lr)?;

        let (hr_post, truth) = if cfg.changes > 0 || cfg.change_removed > 0 {
            let (post, truth) = apply_changes(&hr, &spec)?;
            let post_name = format!("sample_{i:04}_post.rsr");
            let truth_name = format!("sample_{i:04}_truth.rsr");
            write_rsr(args.out_dir.join(&post_name), &post)?;
            write_rsr(args.out_dir.join(&truth_name), &truth)?;
            (Some(post_name), Some(truth_name))
        } else {
            (None, None)
        };

        // 80/10/10 split by index
        let role = if i * 10 < cfg.count * 8 {
            Role::Train
        } else if i * 10 < cfg.count * 9 {
            Role::Val
        } else {
            Role::Test
        };
        entries.push(ManifestEntry {
            index: i,
            role,
            seed: sample_seed,
            hr: hr_name,
            lr: lr_name,
            hr_post,
            truth,
        });
    }
    let manifest = args.out_dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    cfg.echo_sidecar(&manifest)?;
    println!(
        "wrote {} samples to {}",
        entries.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn load_samples(manifest: &Path, role: Role, patch: usize) -> Result<Vec<TrainSample>> {
    let entries = read_manifest(manifest)?;
    let mut samples = Vec::new();
    for entry in entries.iter().filter(|e| e.role == role) {
        let (hr, lr) = terradiff::synth::load_entry_pair(manifest, entry)?;
        for (pair, hr_patch) in extract_patch_pairs(&lr, Some(&hr), patch)? {
            samples.push(TrainSample {
                pair,
                hr: hr_patch.expect("hr supplied"),
            });
        }
    }
    Ok(samples)
}

fn run_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    override_field!(
        cfg,
        args,
        epochs,
        batch,
        lr,
        lambda_consist,
        swa_start,
        patch,
        t_steps,
        base_width,
        mid_width
    );
    cfg.validate()?;

    let samples = load_samples(&args.data, Role::Train, cfg.patch)?;
    if samples.is_empty() {
        bail!("no training samples in {}", args.data.display());
    }
    let n_ch = samples[0].hr.n_ch();
    let mut dn_cfg = cfg.denoiser();
    dn_cfg.in_channels = n_ch;

    let schedule = NoiseSchedule::cosine(cfg.t_steps)?;
    let model = Denoiser::new(dn_cfg, derive_seed(cfg.seed, "init", &[]))?;
    println!(
        "training on {} samples, {} parameters, {} epochs",
        samples.len(),
        model.param_count(),
        cfg.epochs
    );
    let out = train(&samples, model, &cfg.training(), &schedule)?;
    save_checkpoint(&args.out_checkpoint, &out.model)?;

    let curve_path = args.out_checkpoint.with_extension("curve.csv");
    std::fs::write(&curve_path, curve_to_csv(&out.curve))
        .with_context(|| format!("writing {}", curve_path.display()))?;
    cfg.echo_sidecar(&args.out_checkpoint)?;
    let last = out.curve.last().expect("nonempty curve");
    println!(
        "saved {} (final loss {:.6}, curve {})",
        args.out_checkpoint.display(),
        last.loss,
        curve_path.display()
    );
    Ok(())
}

fn run_translate(mut cfg: RunConfig, args: TranslateArgs) -> Result<()> {
    override_field!(cfg, args, n_noisy, n_ddim, d, patch, t_steps, omega_uncond);
    if let Some(src) = &args.color_source {
        cfg.apply("color_source", src)?;
    }
    cfg.validate()?;

    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let input = read_rsr(&args.input)?;
    if input.n_ch() != model.cfg.in_channels {
        bail!(
            "input has {} channels but the model expects {}",
            input.n_ch(),
            model.cfg.in_channels
        );
    }
    let external = match cfg.color_source {
        ColorSource::External => {
            let path = args
                .external
                .as_ref()
                .context("--color-source external requires --external")?;
            Some(read_rsr(path)?)
        }
        ColorSource::Input => None,
    };

    let schedule = NoiseSchedule::cosine(cfg.t_steps)?;
    let out = translate_raster(
        &model,
        &input,
        &cfg.inference(),
        &schedule,
        external.as_ref(),
    )?;
    write_rsr(&args.out, &out)?;
    if let Some(png) = &args.out_png {
        // stretch to [-1, 1] for the 8-bit preview
        let lo = out.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = out.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let mut preview = out.clone();
        for v in preview.data_mut() {
            *v = (*v - lo) / range * 2.0 - 1.0;
        }
        write_png(png, &preview)?;
    }
    cfg.echo_sidecar(&args.out)?;
    println!(
        "translated {} -> {}",
        args.input.display(),
        args.out.display()
    );
    Ok(())
}

fn read_truth_mask(path: &Path) -> Result<Mask> {
    let raster = read_rsr(path)?;
    Ok(Mask::from_raster(&raster)?)
}

fn run_change_detect(mut cfg: RunConfig, args: ChangeDetectArgs) -> Result<()> {
    override_field!(cfg, args, omega, w_otsu, n_min);
    cfg.validate()?;

    let pre = read_rsr(&args.pre)?;
    let post = read_rsr(&args.post)?;
    let map = detect_changes(&pre, &post, &cfg.changedet())?;
    write_rsr(&args.out_map, &map.mask.to_raster())?;

    if let Some(truth_path) = &args.truth {
        let truth = read_truth_mask(truth_path)?;
        let m = evaluate_dr_far(&map.mask, &truth)?;
        if m.dr_defined {
            println!("dr = {:.6}, far = {:.6}", m.dr, m.far);
        } else {
            println!(
                "dr undefined (no changed pixels in truth), far = {:.6}",
                m.far
            );
        }
        if let Some(overlay_path) = &args.out_overlay {
            write_png(overlay_path, &overlay_image(&map.mask, &truth)?)?;
        }
    } else if args.out_overlay.is_some() {
        bail!("--out-overlay requires --truth");
    }
    cfg.echo_sidecar(&args.out_map)?;
    println!(
        "change map: {} positive pixels in {} clusters -> {}",
        map.mask.count(),
        map.cluster_count,
        args.out_map.display()
    );
    Ok(())
}

fn run_roc(mut cfg: RunConfig, args: RocArgs) -> Result<()> {
    override_field!(cfg, args, w_otsu, n_min);
    cfg.validate()?;

    let pre = read_rsr(&args.pre)?;
    let post = read_rsr(&args.post)?;
    let truth = read_truth_mask(&args.truth)?;
    let points = roc_sweep(&pre, &post, &truth, &cfg.changedet())?;
    std::fs::write(&args.out_csv, roc_to_csv(&points))
        .with_context(|| format!("writing {}", args.out_csv.display()))?;

    if let Some(dir) = &args.out_overlay_dir {
        std::fs::create_dir_all(dir)?;
        for i in (0..=100usize).step_by(10) {
            let omega = i as f64 / 100.0;
            let step_cfg = terradiff::changedet::ChangeDetConfig {
                omega,
                ..cfg.changedet()
            };
            let map = detect_changes(&pre, &post, &step_cfg)?;
            let overlay = overlay_image(&map.mask, &truth)?;
            write_png(dir.join(format!("overlay_omega_{i:03}.png")), &overlay)?;
        }
    }
    cfg.echo_sidecar(&args.out_csv)?;
    println!("wrote {} rows to {}", points.len(), args.out_csv.display());
    Ok(())
}

fn run_metrics(mut cfg: RunConfig, args: MetricsArgs) -> Result<()> {
    override_field!(cfg, args, patch);
    let a = read_rsr(&args.a)?;
    let b = read_rsr(&args.b)?;
    let p = psnr(&a, &b, 2.0)?;
    println!("psnr = {p:.4} dB");
    if a.h() % cfg.patch == 0 && a.w() % cfg.patch == 0 {
        let m = mpsnr(&a, &b, cfg.patch, 2.0)?;
        println!("mpsnr(patch={}) = {m:.4} dB", cfg.patch);
    } else {
        println!("mpsnr skipped: dims not divisible by patch {}", cfg.patch);
    }
    Ok(())
}
