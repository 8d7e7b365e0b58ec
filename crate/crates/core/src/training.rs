//! Patchwise training: whitening of condition and target, random
//! nulling of the condition, forward diffusion at a uniformly drawn
//! noise level, Huber + consistency loss with Min-SNR weighting, and
//! the RAdam/SWA epoch loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::color::whiten;
use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Denoiser, RAdam, RAdamConfig, SwaAccumulator, Tensor, TensorSet};
use crate::raster::{PatchPair, RasterImage};

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub p_uncond: f64,
    pub huber_delta: f64,
    pub lambda_consist: f64,
    pub eps_consist: usize,
    pub n_consist: usize,
    pub gamma_snr: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub swa_start: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.1,
            huber_delta: 0.5,
            lambda_consist: 0.1,
            eps_consist: 10,
            n_consist: 1,
            gamma_snr: 5.0,
            lr: 1e-4,
            batch_size: 4,
            epochs: 31,
            swa_start: 10,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidArgument(format!(
                "p_uncond {} outside [0,1]",
                self.p_uncond
            )));
        }
        if self.gamma_snr <= 0.0 {
            return Err(Error::InvalidArgument("gamma_snr must be positive".into()));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::InvalidArgument(
                "huber_delta must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One training sample: the conditioning pair and the HR target patch.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub pair: PatchPair,
    pub hr: RasterImage,
}

/// Mean Huber loss with threshold `delta`.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pred.shape()),
            got: format!("{:?}", target.shape()),
        });
    }
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let e = (p - t).abs();
        acc += if e <= delta {
            0.5 * e * e
        } else {
            delta * (e - 0.5 * delta)
        };
    }
    Ok(acc / n)
}

/// Gradient of the mean Huber loss w.r.t. the prediction.
fn huber_grad(pred: &Tensor, target: &Tensor, delta: f64) -> Tensor {
    let n = pred.len() as f64;
    let mut g = pred.zeros_like();
    for ((gv, &p), &t) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let e = p - t;
        *gv = if e.abs() <= delta {
            e
        } else {
            delta * e.signum()
        } / n;
    }
    g
}

/// Min-SNR loss weight: min(SNR, gamma_snr) / SNR, always in (0, 1].
pub fn min_snr_weight(gamma_t: f64, gamma_snr: f64) -> Result<f64> {
    if !(gamma_t > 0.0 && gamma_t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma_t} outside (0,1)"
        )));
    }
    let snr = gamma_t / (1.0 - gamma_t);
    Ok(snr.min(gamma_snr) / snr)
}

fn standard_normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(shape, data)
}

/// sqrt(gamma) * y0 + sqrt(1 - gamma) * eps, in f64.
fn diffuse_tensor(y0: &Tensor, eps: &Tensor, gamma: f64) -> Tensor {
    let sg = gamma.sqrt();
    let se = (1.0 - gamma).sqrt();
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| sg * a + se * b)
        .collect();
    Tensor::from_vec(y0.shape(), data)
}

/// Clean-image estimate implied by a noise prediction, clamped to the
/// whitened range (the sampler's convention).
fn implied_x0(y_t: &Tensor, eps_hat: &Tensor, gamma: f64) -> Tensor {
    let sg = gamma.sqrt();
    let se = (1.0 - gamma).sqrt();
    let data = y_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&y, &e)| ((y - se * e) / sg).clamp(-1.0, 1.0))
        .collect();
    Tensor::from_vec(y_t.shape(), data)
}

/// Draws the consistency timestep: uniform over the window around `t`
/// clipped to the schedule.
fn draw_consist_t(rng: &mut ChaCha8Rng, t: usize, eps_consist: usize, t_steps: usize) -> usize {
    let lo = t.saturating_sub(eps_consist);
    let hi = (t + eps_consist).min(t_steps - 1);
    rng.gen_range(lo..=hi)
}

/// Forward-only consistency loss: squared distance between the clean
/// estimates implied at `t` and at a nearby timestep `t'`, the latter
/// treated as a constant. Averaged over `n_consist` draws.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss(
    model: &Denoiser,
    y0: &Tensor,
    eps: &Tensor,
    condition: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let gamma = schedule.gamma(t);
    let y_t = diffuse_tensor(y0, eps, gamma);
    let eps_hat = model.forward(&y_t, condition, gamma)?;
    let x0 = implied_x0(&y_t, &eps_hat, gamma);

    let reps = cfg.n_consist.max(1);
    let mut acc = 0.0;
    for _ in 0..reps {
        let t2 = draw_consist_t(rng, t, cfg.eps_consist, schedule.len());
        let gamma2 = schedule.gamma(t2);
        let y_t2 = diffuse_tensor(y0, eps, gamma2);
        let eps_hat2 = model.forward(&y_t2, condition, gamma2)?;
        let x0_2 = implied_x0(&y_t2, &eps_hat2, gamma2);
        let n = x0.len() as f64;
        let mse: f64 = x0
            .data()
            .iter()
            .zip(x0_2.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        acc += mse;
    }
    Ok(acc / reps as f64)
}

/// Everything produced by one per-sample pass.
struct SampleOutcome {
    loss: f64,
    loss_ddpm: f64,
    loss_consist: f64,
    grads: TensorSet,
}

/// Builds the whitened conditioning stack x = [W(local) ; W(global)].
pub fn whitened_condition(pair: &PatchPair) -> Result<RasterImage> {
    let (x_local, _) = whiten(&pair.local);
    let (x_global, _) = whiten(&pair.global);
    RasterImage::concat_channels(&[&x_local, &x_global])
}

/// One sample's forward/backward pass. All randomness comes from the
/// supplied stream, so per-sample work can run on any thread.
fn sample_pass(
    model: &Denoiser,
    sample: &TrainSample,
    cfg: &TrainingConfig,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let n_ch = sample.hr.n_ch();
    let (h, w) = (sample.hr.h(), sample.hr.w());

    // condition: whitened local+global stack, or the null matrix
    let x_real = whitened_condition(&sample.pair)?;
    debug_assert!(x_real
        .data()
        .iter()
        .all(|&v| (-1.0..=1.0).contains(&v) && v != guidance.null_value));
    let uncond = rng.gen_range(0.0..1.0) < cfg.p_uncond;
    let x = if uncond {
        Tensor::from_raster(&guidance.null_condition(2 * n_ch, h, w))
    } else {
        Tensor::from_raster(&x_real)
    };

    let (y0_raster, _) = whiten(&sample.hr);
    let y0 = Tensor::from_raster(&y0_raster);
    let eps = standard_normal_tensor(rng, &[n_ch, h, w]);
    let t = rng.gen_range(0..schedule.len());
    let gamma = schedule.gamma(t);

    let y_t = diffuse_tensor(&y0, &eps, gamma);
    let (eps_hat, cache) = model.forward_cached(&y_t, &x, gamma)?;

    let weight = min_snr_weight(gamma, cfg.gamma_snr)?;
    let loss_ddpm = weight * huber_loss(&eps_hat, &eps, cfg.huber_delta)?;
    let mut upstream = huber_grad(&eps_hat, &eps, cfg.huber_delta);
    for g in upstream.data_mut() {
        *g *= weight;
    }

    // consistency: pull the clean estimate at t toward the (detached)
    // estimate at a nearby timestep
    let mut loss_consist = 0.0;
    if cfg.lambda_consist > 0.0 && cfg.n_consist > 0 {
        let sg = gamma.sqrt();
        let se = (1.0 - gamma).sqrt();
        let n = y0.len() as f64;
        let x0 = implied_x0(&y_t, &eps_hat, gamma);
        for _ in 0..cfg.n_consist {
            let t2 = draw_consist_t(rng, t, cfg.eps_consist, schedule.len());
            let gamma2 = schedule.gamma(t2);
            let y_t2 = diffuse_tensor(&y0, &eps, gamma2);
            let eps_hat2 = model.forward(&y_t2, &x, gamma2)?;
            let x0_2 = implied_x0(&y_t2, &eps_hat2, gamma2);

            let mut mse = 0.0;
            for i in 0..x0.len() {
                let d = x0.data()[i] - x0_2.data()[i];
                mse += d * d;
                // gradient only flows through the un-clamped region of
                // the t-branch estimate
                let raw = (y_t.data()[i] - se * eps_hat.data()[i]) / sg;
                if raw.abs() <= 1.0 {
                    upstream.data_mut()[i] +=
                        cfg.lambda_consist / cfg.n_consist as f64 * (2.0 * d / n) * (-se / sg);
                }
            }
            loss_consist += mse / n;
        }
        loss_consist /= cfg.n_consist as f64;
    }

    let loss = loss_ddpm + cfg.lambda_consist * loss_consist;
    if !loss.is_finite() {
        return Err(Error::Model(format!(
            "non-finite loss (ddpm {loss_ddpm}, consist {loss_consist}) at t={t}"
        )));
    }
    let grads = model.backward(&cache, &upstream);
    Ok(SampleOutcome {
        loss,
        loss_ddpm,
        loss_consist,
        grads,
    })
}

/// Mixes a label and counters into the base seed to derive independent
/// deterministic streams (FNV-1a over the parts).
pub fn derive_seed(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in base.to_le_bytes() {
        eat(b);
    }
    for b in label.bytes() {
        eat(b);
    }
    for p in parts {
        for b in p.to_le_bytes() {
            eat(b);
        }
    }
    h
}

/// One point of the loss curve, one optimizer step each.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub loss_ddpm: f64,
    pub loss_consist: f64,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,epoch,loss,loss_ddpm,loss_consist\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step, p.epoch, p.loss, p.loss_ddpm, p.loss_consist
        ));
    }
    out
}

pub struct TrainOutput {
    /// Final model: the SWA mean when any snapshots were taken, the last
    /// parameters otherwise.
    pub model: Denoiser,
    pub curve: Vec<CurvePoint>,
}

/// One optimizer step over a batch: per-sample passes run in parallel on
/// independent rng streams, gradients are averaged in dataset order,
/// then a single RAdam update is applied.
fn batch_step(
    model: &mut Denoiser,
    optimizer: &mut RAdam,
    samples: &[(usize, &TrainSample)],
    cfg: &TrainingConfig,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    epoch: u64,
) -> Result<(f64, f64, f64)> {
    let model_ref = &*model;
    let outcomes: Vec<Result<SampleOutcome>> = samples
        .par_iter()
        .map(|(index, sample)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                "train-sample",
                &[epoch, *index as u64],
            ));
            sample_pass(model_ref, sample, cfg, guidance, schedule, &mut rng)
        })
        .collect();

    let mut grads: Option<TensorSet> = None;
    let mut loss = 0.0;
    let mut loss_ddpm = 0.0;
    let mut loss_consist = 0.0;
    let k = samples.len() as f64;
    for outcome in outcomes {
        let o = outcome?;
        loss += o.loss / k;
        loss_ddpm += o.loss_ddpm / k;
        loss_consist += o.loss_consist / k;
        match &mut grads {
            None => grads = Some(o.grads),
            Some(g) => g.axpy(1.0, &o.grads),
        }
    }
    let mut grads = grads.expect("non-empty batch");
    grads.scale(1.0 / k);
    optimizer.step(&mut model.params, &grads)?;
    Ok((loss, loss_ddpm, loss_consist))
}

/// Runs the epoch loop: seeded shuffling, batch accumulation, one SWA
/// snapshot per epoch end.
pub fn train(
    dataset: &[TrainSample],
    mut model: Denoiser,
    cfg: &TrainingConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let guidance = GuidanceConfig::default();
    let mut optimizer = RAdam::new(
        &model.params,
        RAdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut swa = SwaAccumulator::new(cfg.swa_start);
    let mut curve = Vec::new();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", &[epoch]));
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &TrainSample)> =
                chunk.iter().map(|&i| (i, &dataset[i])).collect();
            let (loss, loss_ddpm, loss_consist) = batch_step(
                &mut model,
                &mut optimizer,
                &batch,
                cfg,
                &guidance,
                schedule,
                epoch,
            )?;
            step += 1;
            curve.push(CurvePoint {
                step,
                epoch,
                loss,
                loss_ddpm,
                loss_consist,
            });
        }
        swa.update(&model.params, epoch);
    }

    if let Some(mean) = swa.mean() {
        model.params = mean;
    }
    Ok(TrainOutput { model, curve })
}

/// Deterministic forward-only loss over a dataset; per-sample draws are
/// keyed by sample index alone, so different models are compared
/// draw-for-draw.
pub fn evaluate_loss(
    model: &Denoiser,
    dataset: &[TrainSample],
    cfg: &TrainingConfig,
    schedule: &NoiseSchedule,
    eval_seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation dataset".into()));
    }
    let sum: Result<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(eval_seed, "eval-sample", &[index as u64]));
            let n_ch = sample.hr.n_ch();
            let (h, w) = (sample.hr.h(), sample.hr.w());
            let x_real = whitened_condition(&sample.pair)?;
            let uncond = rng.gen_range(0.0..1.0) < cfg.p_uncond;
            let x = if uncond {
                Tensor::from_raster(&GuidanceConfig::default().null_condition(2 * n_ch, h, w))
            } else {
                Tensor::from_raster(&x_real)
            };
            let (y0_raster, _) = whiten(&sample.hr);
            let y0 = Tensor::from_raster(&y0_raster);
            let eps = standard_normal_tensor(&mut rng, &[n_ch, h, w]);
            let t = rng.gen_range(0..schedule.len());
            let gamma = schedule.gamma(t);
            let y_t = diffuse_tensor(&y0, &eps, gamma);
            let eps_hat = model.forward(&y_t, &x, gamma)?;
            let weight = min_snr_weight(gamma, cfg.gamma_snr)?;
            let mut loss = weight * huber_loss(&eps_hat, &eps, cfg.huber_delta)?;
            if cfg.lambda_consist > 0.0 && cfg.n_consist > 0 {
                loss += cfg.lambda_consist
                    * consistency_loss(model, &y0, &eps, &x, t, schedule, cfg, &mut rng)?;
            }
            Ok(loss)
        })
        .sum();
    Ok(sum? / dataset.len() as f64)
}
