//! Noise schedule, forward diffusion, classifier-free-guidance noise
//! combination and the deterministic DDIM reverse sampler.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Cosine noise schedule: gamma values for each timestep plus derived
/// signal-to-noise ratios. Strictly decreasing, always inside (0, 1).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
    snr: Vec<f64>,
}

impl NoiseSchedule {
    /// gamma_t = cos^2(((t/T + 0.008) / 1.008) * pi/2) for t in 0..T.
    pub fn cosine(t_steps: usize) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {t_steps}"
            )));
        }
        let t_f = t_steps as f64;
        let mut gamma = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let u = (t as f64 / t_f + 0.008) / 1.008;
            let g = (u * std::f64::consts::FRAC_PI_2).cos().powi(2);
            gamma.push(g);
        }
        let snr = gamma.iter().map(|&g| g / (1.0 - g)).collect();
        Ok(Self { gamma, snr })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    #[inline]
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    #[inline]
    pub fn snr(&self, t: usize) -> f64 {
        self.snr[t]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// `n` timesteps uniformly spaced over the schedule, descending from
    /// T-1 down to 0.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t_steps = self.len();
        if n < 1 || n > t_steps {
            return Err(Error::InvalidArgument(format!(
                "step count {n} outside 1..={t_steps}"
            )));
        }
        if n == 1 {
            return Ok(vec![t_steps - 1]);
        }
        let top = (t_steps - 1) as f64;
        let mut ts = Vec::with_capacity(n);
        for k in 0..n {
            let frac = (n - 1 - k) as f64 / (n - 1) as f64;
            ts.push((top * frac).round() as usize);
        }
        Ok(ts)
    }
}

/// Classifier-free guidance settings: the guidance weight and the fill
/// value of the null-condition matrix (outside the whitened [-1, 1]
/// range so it can never be mistaken for image content).
#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub omega_uncond: f64,
    pub null_value: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega_uncond: 1.0,
            null_value: -2.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if (-1.0..=1.0).contains(&self.null_value) {
            return Err(Error::InvalidArgument(format!(
                "null value {} lies inside [-1, 1]",
                self.null_value
            )));
        }
        Ok(())
    }

    pub fn null_condition(&self, n_ch: usize, h: usize, w: usize) -> RasterImage {
        RasterImage::filled(n_ch, h, w, self.null_value)
    }
}

fn check_same_shape(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Forward diffusion: sqrt(gamma) * y0 + sqrt(1 - gamma) * eps.
pub fn forward_diffuse(y0: &RasterImage, eps: &RasterImage, gamma: f64) -> Result<RasterImage> {
    check_same_shape(y0, eps)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} outside [0, 1]"
        )));
    }
    let (c, h, w) = y0.shape();
    let sg = gamma.sqrt();
    let se = (1.0 - gamma).sqrt();
    let data: Vec<f32> = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| (sg * f64::from(a) + se * f64::from(b)) as f32)
        .collect();
    RasterImage::new(c, h, w, data)
}

/// Guided noise estimate: (1 + omega) * eps_cond - omega * eps_uncond.
pub fn cfg_epsilon(
    eps_cond: &RasterImage,
    eps_uncond: &RasterImage,
    omega: f64,
) -> Result<RasterImage> {
    check_same_shape(eps_cond, eps_uncond)?;
    let (c, h, w) = eps_cond.shape();
    let data: Vec<f32> = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&ec, &eu)| ((1.0 + omega) * f64::from(ec) - omega * f64::from(eu)) as f32)
        .collect();
    RasterImage::new(c, h, w, data)
}

/// One deterministic DDIM update. Returns the previous-step sample and
/// the implied clean estimate x0 (clamped to [-1, 1]).
pub fn ddim_step(
    y_t: &RasterImage,
    eps_hat: &RasterImage,
    gamma_t: f64,
    gamma_prev: f64,
) -> Result<(RasterImage, RasterImage)> {
    check_same_shape(y_t, eps_hat)?;
    if gamma_t <= 0.0 || gamma_t > 1.0 || gamma_prev <= 0.0 || gamma_prev > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "gamma_t {gamma_t}, gamma_prev {gamma_prev} outside (0, 1]"
        )));
    }
    if gamma_prev < gamma_t {
        return Err(Error::InvalidArgument(format!(
            "gamma_prev {gamma_prev} < gamma_t {gamma_t}: reverse steps must reduce noise"
        )));
    }
    let (c, h, w) = y_t.shape();
    let sg_t = gamma_t.sqrt();
    let se_t = (1.0 - gamma_t).sqrt();
    let sg_p = gamma_prev.sqrt();
    let se_p = (1.0 - gamma_prev).sqrt();

    let mut x0 = vec![0f32; c * h * w];
    let mut y_prev = vec![0f32; c * h * w];
    for i in 0..c * h * w {
        let y = f64::from(y_t.data()[i]);
        let e = f64::from(eps_hat.data()[i]);
        let x = ((y - se_t * e) / sg_t).clamp(-1.0, 1.0);
        x0[i] = x as f32;
        y_prev[i] = (sg_p * x + se_p * e) as f32;
    }
    Ok((
        RasterImage::new(c, h, w, y_prev)?,
        RasterImage::new(c, h, w, x0)?,
    ))
}

/// Noise-prediction model interface: given a noisy sample, a conditioning
/// stack (or the null matrix) and the noise level, predict the noise.
pub trait EpsilonModel {
    fn predict(
        &self,
        y_noisy: &RasterImage,
        condition: &RasterImage,
        gamma: f64,
    ) -> Result<RasterImage>;
}

/// Deterministic DDIM reverse sampling with classifier-free guidance.
///
/// Runs `n_steps` model evaluations (each with a conditional and an
/// unconditional branch) down a uniformly spaced descending timestep
/// sequence, and returns the clean estimate from the final step.
pub fn ddim_sample<M: EpsilonModel>(
    model: &M,
    eps_t: &RasterImage,
    condition: &RasterImage,
    n_steps: usize,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<RasterImage> {
    guidance.validate()?;
    let ts = schedule.ddim_timesteps(n_steps)?;
    let (c, h, w) = condition.shape();
    let null = guidance.null_condition(c, h, w);

    let mut y = eps_t.clone();
    let mut x0 = None;
    for (k, &t) in ts.iter().enumerate() {
        let gamma_t = schedule.gamma(t);
        let eps_cond = model.predict(&y, condition, gamma_t)?;
        let eps_uncond = model.predict(&y, &null, gamma_t)?;
        let eps_hat = cfg_epsilon(&eps_cond, &eps_uncond, guidance.omega_uncond)?;
        let gamma_prev = if k + 1 < ts.len() {
            schedule.gamma(ts[k + 1])
        } else {
            gamma_t
        };
        let (y_next, x0_step) = ddim_step(&y, &eps_hat, gamma_t, gamma_prev)?;
        y = y_next;
        x0 = Some(x0_step);
    }
    Ok(x0.expect("n_steps >= 1 guarantees at least one step"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_img(seed: u64, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        RasterImage::new(c, h, w, data).unwrap()
    }

    #[test]
    fn cosine_endpoints_match_direct_evaluation() {
        let sched = NoiseSchedule::cosine(1024).unwrap();
        let direct = |t: f64| {
            let u = (t / 1024.0 + 0.008) / 1.008;
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        assert!((sched.gamma(0) - direct(0.0)).abs() / direct(0.0) < 1e-12);
        assert!((sched.gamma(1023) - direct(1023.0)).abs() / direct(1023.0) < 1e-12);
        assert!((sched.gamma(0) - 0.999_844_6).abs() < 1e-6);
        assert!(sched.gamma(1023) < 3e-6 && sched.gamma(1023) > 2e-6);
    }

    #[test]
    fn schedule_strictly_decreasing_in_open_interval() {
        for t_steps in [2usize, 3, 17, 256, 1024] {
            let sched = NoiseSchedule::cosine(t_steps).unwrap();
            for t in 0..t_steps {
                let g = sched.gamma(t);
                assert!(g > 0.0 && g < 1.0, "T={t_steps} t={t} gamma={g}");
                if t > 0 {
                    assert!(
                        g < sched.gamma(t - 1),
                        "not decreasing at T={t_steps} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let y0 = random_img(1, 2, 4, 4, -1.0, 1.0);
        let eps = random_img(2, 2, 4, 4, -2.0, 2.0);
        let at_one = forward_diffuse(&y0, &eps, 1.0).unwrap();
        assert_eq!(at_one.data(), y0.data());
        let at_zero = forward_diffuse(&y0, &eps, 0.0).unwrap();
        assert_eq!(at_zero.data(), eps.data());
    }

    #[test]
    fn forward_diffuse_scalar_case() {
        let y0 = RasterImage::filled(1, 1, 1, 1.0);
        let eps = RasterImage::filled(1, 1, 1, 0.5);
        let out = forward_diffuse(&y0, &eps, 0.25).unwrap();
        let expect = 0.25f64.sqrt() * 1.0 + 0.75f64.sqrt() * 0.5;
        assert!((f64::from(out.get(0, 0, 0)) - expect).abs() < 1e-7);
        assert!((expect - 0.933_012).abs() < 1e-6);
    }

    #[test]
    fn forward_diffuse_variance_tracks_noise_level() {
        // y0 = 0, unit-normal eps: Var[y_t] should be close to (1 - gamma)
        let gamma = 0.3;
        let n = 200_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let eps: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
            .collect();
        let y0 = RasterImage::zeros(1, 400, 500);
        let eps_img = RasterImage::new(1, 400, 500, eps).unwrap();
        let yt = forward_diffuse(&y0, &eps_img, gamma).unwrap();
        let mean: f64 = yt.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var: f64 = yt
            .data()
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let expect = 1.0 - gamma;
        assert!(
            (var - expect).abs() / expect < 0.05,
            "var {var} vs {expect}"
        );
    }

    #[test]
    fn cfg_identities() {
        let ec = random_img(3, 1, 8, 8, -1.0, 1.0);
        let eu = random_img(4, 1, 8, 8, -1.0, 1.0);
        let unguided = cfg_epsilon(&ec, &eu, 0.0).unwrap();
        assert_eq!(unguided.data(), ec.data());

        let same = cfg_epsilon(&ec, &ec, 1.75).unwrap();
        for (a, b) in same.data().iter().zip(ec.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let scalar = cfg_epsilon(
            &RasterImage::filled(1, 1, 1, 0.2),
            &RasterImage::filled(1, 1, 1, 0.1),
            1.0,
        )
        .unwrap();
        assert!((scalar.get(0, 0, 0) - 0.3).abs() < 1e-7);
    }

    #[test]
    fn ddim_step_inverts_forward_diffusion() {
        let y0 = random_img(5, 2, 6, 6, -1.0, 1.0);
        let eps = random_img(6, 2, 6, 6, -2.0, 2.0);
        let gamma_t = 0.25;
        let y_t = forward_diffuse(&y0, &eps, gamma_t).unwrap();
        let (_, x0) = ddim_step(&y_t, &eps, gamma_t, 0.5).unwrap();
        for (a, b) in x0.data().iter().zip(y0.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        // gamma_prev = 1 with the exact noise reproduces y0
        let (y_prev, _) = ddim_step(&y_t, &eps, gamma_t, 1.0).unwrap();
        for (a, b) in y_prev.data().iter().zip(y0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_step_is_deterministic() {
        let y = random_img(7, 1, 5, 5, -1.0, 1.0);
        let e = random_img(8, 1, 5, 5, -1.0, 1.0);
        let (a1, b1) = ddim_step(&y, &e, 0.3, 0.6).unwrap();
        let (a2, b2) = ddim_step(&y, &e, 0.3, 0.6).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn ddim_timesteps_span_descending() {
        let sched = NoiseSchedule::cosine(1024).unwrap();
        let ts = sched.ddim_timesteps(8).unwrap();
        assert_eq!(ts.len(), 8);
        assert_eq!(ts[0], 1023);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(sched.ddim_timesteps(1).unwrap(), vec![1023]);
        assert!(sched.ddim_timesteps(0).is_err());
        assert!(sched.ddim_timesteps(1025).is_err());
    }

    /// Stub model that always answers with a fixed noise image.
    struct FixedEps(RasterImage);
    impl EpsilonModel for FixedEps {
        fn predict(
            &self,
            _y: &RasterImage,
            _c: &RasterImage,
            _g: f64,
        ) -> crate::error::Result<RasterImage> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn single_step_sampling_recovers_y0_from_exact_noise() {
        let sched = NoiseSchedule::cosine(64).unwrap();
        let y0 = random_img(9, 1, 8, 8, -0.9, 0.9);
        let eps = random_img(10, 1, 8, 8, -2.0, 2.0);
        let g_top = sched.gamma(63);
        let y_t = forward_diffuse(&y0, &eps, g_top).unwrap();
        let model = FixedEps(eps);
        let out = ddim_sample(
            &model,
            &y_t,
            &RasterImage::zeros(2, 8, 8),
            1,
            &GuidanceConfig::default(),
            &sched,
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(y0.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_is_repeatable() {
        let sched = NoiseSchedule::cosine(32).unwrap();
        let eps_t = random_img(11, 1, 8, 8, -1.5, 1.5);
        let cond = random_img(12, 2, 8, 8, -1.0, 1.0);
        let model = FixedEps(random_img(13, 1, 8, 8, -0.5, 0.5));
        let a = ddim_sample(&model, &eps_t, &cond, 6, &GuidanceConfig::default(), &sched).unwrap();
        let b = ddim_sample(&model, &eps_t, &cond, 6, &GuidanceConfig::default(), &sched).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a
            .data()
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn null_value_must_sit_outside_unit_range() {
        let bad = GuidanceConfig {
            omega_uncond: 1.0,
            null_value: 0.5,
        };
        assert!(bad.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }
}
