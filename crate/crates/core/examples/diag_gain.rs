use terradiff::color::whiten;
use terradiff::diffusion::NoiseSchedule;
use terradiff::inference::{psnr, voted_translate_patch, ColorSource, InferenceConfig};
use terradiff::nn::{Denoiser, DenoiserConfig};
use terradiff::raster::extract_patch_pairs;
use terradiff::synth::{generate_pair, ChangeSpec, SceneSpec};
use terradiff::training::{train, TrainSample, TrainingConfig};

fn spec(seed: u64, shift: f32) -> SceneSpec {
    SceneSpec {
        seed,
        size: 64,
        n_rect: 6,
        n_line: 2,
        n_ellipse: 3,
        noise_octaves: 3,
        color_shift: shift,
        blur_factor: 3,
        sensor_noise: 0.02,
        changes: ChangeSpec::default(),
    }
}

fn samples(first: u64, scenes: usize, shift: f32) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for s in 0..scenes {
        let (hr, lr) = generate_pair(&spec(first + s as u64, shift)).unwrap();
        for (pair, hrp) in extract_patch_pairs(&lr, Some(&hr), 32).unwrap() {
            out.push(TrainSample {
                pair,
                hr: hrp.unwrap(),
            });
        }
    }
    out
}

fn main() {
    let shift = 0.3f32;
    let sched = NoiseSchedule::cosine(1024).unwrap();
    let train_set = samples(1000, 50, shift);
    let val = samples(9000, 5, shift);
    let cfg = TrainingConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: 22,
        swa_start: 10,
        seed: 42,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(
        &train_set,
        Denoiser::new(DenoiserConfig::default(), 42).unwrap(),
        &cfg,
        &sched,
    )
    .unwrap();
    eprintln!(
        "trained {} steps in {:.0}s",
        out.curve.len(),
        t0.elapsed().as_secs_f64()
    );

    let icfg = InferenceConfig {
        n_ddim: 64,
        d: 8,
        n_noisy: 8,
        omega_uncond: 1.0,
        color_source: ColorSource::External,
        patch: 32,
        seed: 4242,
    };
    let (mut base, mut tr_ext, mut tr_inp) = (0.0, 0.0, 0.0);
    for s in &val {
        base += psnr(&s.pair.local, &s.hr, 2.0).unwrap();
        let ext_stats = whiten(&s.hr).1;
        let (img_e, _) =
            voted_translate_patch(&out.model, &s.pair, &icfg, &sched, Some(&ext_stats)).unwrap();
        tr_ext += psnr(&img_e, &s.hr, 2.0).unwrap();
        let (img_i, _) = voted_translate_patch(&out.model, &s.pair, &icfg, &sched, None).unwrap();
        tr_inp += psnr(&img_i, &s.hr, 2.0).unwrap();
    }
    let n = val.len() as f64;
    println!("baseline LR {:.3} dB | translated ext {:.3} dB (gain {:+.3}) | translated input {:.3} dB (gain {:+.3})",
        base/n, tr_ext/n, tr_ext/n - base/n, tr_inp/n, tr_inp/n - base/n);
}
