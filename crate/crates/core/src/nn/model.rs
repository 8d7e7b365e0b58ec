//! The trainable noise predictor: a small convolutional network with a
//! single stride-2 down/up pair, residual blocks conditioned on the
//! noise level, and a zero-initialized output head.
//!
//! The noisy sample and the conditioning stack (local + global context,
//! or the null matrix) enter as concatenated channels. The noise level
//! gamma enters as a sinusoidal embedding of log-SNR, projected to a
//! per-channel bias inside every block.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::diffusion::EpsilonModel;
use crate::error::{Error, Result};
use crate::nn::layers::*;
use crate::nn::tensor::{Tensor, TensorSet};
use crate::raster::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channels of the image being denoised; the condition carries twice
    /// as many (local stacked with global).
    pub in_channels: usize,
    pub base_width: usize,
    pub mid_width: usize,
    /// Sinusoidal frequencies for the noise-level embedding; the
    /// embedding vector has twice this many features.
    pub freq_features: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            mid_width: 64,
            freq_features: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn emb_dim(&self) -> usize {
        2 * self.freq_features
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.mid_width == 0 {
            return Err(Error::InvalidArgument(
                "zero-sized denoiser dimension".into(),
            ));
        }
        if self.freq_features < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 embedding frequencies".into(),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of log-SNR with geometrically spaced frequencies
/// from 1 down to 1e-3.
pub fn gamma_embedding(gamma: f64, freq_features: usize) -> Vec<f64> {
    let log_snr = (gamma / (1.0 - gamma)).ln();
    let mut emb = Vec::with_capacity(2 * freq_features);
    for k in 0..freq_features {
        let f = 10f64.powf(-3.0 * k as f64 / (freq_features as f64 - 1.0));
        emb.push((log_snr * f).sin());
        emb.push((log_snr * f).cos());
    }
    emb
}

// tensor indices within the parameter set
const CONV_IN_W: usize = 0;
const CONV_IN_B: usize = 1;
const ENC: usize = 2;
const DOWN_W: usize = 8;
const DOWN_B: usize = 9;
const MID: usize = 10;
const UP_W: usize = 16;
const UP_B: usize = 17;
const DEC: usize = 18;
const OUT_W: usize = 24;
const OUT_B: usize = 25;
const TENSOR_COUNT: usize = 26;

// offsets inside a block
const BLK_NORM_SCALE: usize = 0;
const BLK_NORM_SHIFT: usize = 1;
const BLK_EMB_W: usize = 2;
const BLK_EMB_B: usize = 3;
const BLK_CONV_W: usize = 4;
const BLK_CONV_B: usize = 5;

/// Deterministic tensor naming for checkpoints and diagnostics.
pub fn tensor_names() -> Vec<String> {
    let block = |p: &str| {
        vec![
            format!("{p}.norm.scale"),
            format!("{p}.norm.shift"),
            format!("{p}.emb.weight"),
            format!("{p}.emb.bias"),
            format!("{p}.conv.weight"),
            format!("{p}.conv.bias"),
        ]
    };
    let mut names = vec!["conv_in.weight".to_string(), "conv_in.bias".to_string()];
    names.extend(block("enc"));
    names.push("down.weight".into());
    names.push("down.bias".into());
    names.extend(block("mid"));
    names.push("up.weight".into());
    names.push("up.bias".into());
    names.extend(block("dec"));
    names.push("out.weight".into());
    names.push("out.bias".into());
    names
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: TensorSet,
}

struct BlockCache {
    input: Tensor,
    gn: GroupNormCache,
    biased: Tensor,
    act: Tensor,
    emb: Vec<f64>,
}

/// Activations retained by a forward pass for the matching backward.
pub struct ForwardCache {
    x_in: Tensor,
    enc: BlockCache,
    a1: Tensor,
    mid: BlockCache,
    u0: Tensor,
    dec: BlockCache,
    a2: Tensor,
}

impl Denoiser {
    /// He fan-in initialization; the output head starts at exactly zero
    /// so the first noise prediction is zero.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, base, mid, emb) = (
            cfg.in_channels,
            cfg.base_width,
            cfg.mid_width,
            cfg.emb_dim(),
        );

        fn he_conv(rng: &mut rand_chacha::ChaCha8Rng, oc: usize, ic: usize) -> Tensor {
            let std = (2.0 / (ic as f64 * 9.0)).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            let data = (0..oc * ic * 9).map(|_| dist.sample(rng)).collect();
            Tensor::from_vec(&[oc, ic, 3, 3], data)
        }

        fn block(rng: &mut rand_chacha::ChaCha8Rng, width: usize, emb: usize) -> Vec<Tensor> {
            let mut scale = Tensor::zeros(&[width]);
            scale.fill(1.0);
            let std = (2.0 / emb as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            let emb_w = Tensor::from_vec(
                &[width, emb],
                (0..width * emb).map(|_| dist.sample(rng)).collect(),
            );
            let conv_std = (2.0 / (width as f64 * 9.0)).sqrt();
            let conv_dist = Normal::new(0.0, conv_std).expect("valid std");
            let conv_w = Tensor::from_vec(
                &[width, width, 3, 3],
                (0..width * width * 9)
                    .map(|_| conv_dist.sample(rng))
                    .collect(),
            );
            vec![
                scale,
                Tensor::zeros(&[width]),
                emb_w,
                Tensor::zeros(&[width]),
                conv_w,
                Tensor::zeros(&[width]),
            ]
        }

        let mut tensors = Vec::with_capacity(TENSOR_COUNT);
        tensors.push(he_conv(&mut rng, base, 3 * n)); // conv_in.weight
        tensors.push(Tensor::zeros(&[base]));
        tensors.extend(block(&mut rng, base, emb)); // enc
        tensors.push(he_conv(&mut rng, mid, base)); // down
        tensors.push(Tensor::zeros(&[mid]));
        tensors.extend(block(&mut rng, mid, emb)); // mid
        tensors.push(he_conv(&mut rng, base, mid)); // up
        tensors.push(Tensor::zeros(&[base]));
        tensors.extend(block(&mut rng, base, emb)); // dec
        tensors.push(Tensor::zeros(&[n, base, 3, 3])); // out head, zero
        tensors.push(Tensor::zeros(&[n]));

        Ok(Self {
            cfg,
            params: TensorSet { tensors },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn check_shapes(&self, y: &Tensor, cond: &Tensor) -> Result<(usize, usize)> {
        let n = self.cfg.in_channels;
        if y.shape().len() != 3 || y.shape()[0] != n {
            return Err(Error::ShapeMismatch {
                expected: format!("[{n}, h, w] noisy input"),
                got: format!("{:?}", y.shape()),
            });
        }
        let (h, w) = (y.shape()[1], y.shape()[2]);
        if cond.shape() != [2 * n, h, w] {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, {h}, {w}] condition", 2 * n),
                got: format!("{:?}", cond.shape()),
            });
        }
        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
            return Err(Error::InvalidArgument(format!(
                "denoiser spatial dims must be even and >= 2, got {h}x{w}"
            )));
        }
        Ok((h, w))
    }

    fn block_forward(&self, base_idx: usize, x: &Tensor, emb: &[f64]) -> (Tensor, BlockCache) {
        let t = &self.params.tensors;
        let width = x.shape()[0];
        let groups = group_count(width);
        let (gn_out, gn) = group_norm_forward(
            x,
            &t[base_idx + BLK_NORM_SCALE],
            &t[base_idx + BLK_NORM_SHIFT],
            groups,
        );
        let biased = channel_bias_forward(
            &gn_out,
            &t[base_idx + BLK_EMB_W],
            &t[base_idx + BLK_EMB_B],
            emb,
        );
        let act = silu_forward(&biased);
        let conv = conv3x3_forward(
            &act,
            &t[base_idx + BLK_CONV_W],
            &t[base_idx + BLK_CONV_B],
            1,
        );
        let mut out = conv;
        for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
            *o += xi;
        }
        (
            out,
            BlockCache {
                input: x.clone(),
                gn,
                biased,
                act,
                emb: emb.to_vec(),
            },
        )
    }

    /// Backward through one block; returns the gradient w.r.t. the block
    /// input and writes parameter gradients into `grads`.
    fn block_backward(
        &self,
        base_idx: usize,
        cache: &BlockCache,
        grad_out: &Tensor,
        grads: &mut TensorSet,
    ) -> Tensor {
        let t = &self.params.tensors;
        let (g_act, g_conv_w, g_conv_b) =
            conv3x3_backward(&cache.act, &t[base_idx + BLK_CONV_W], grad_out, 1, true);
        let g_biased = silu_backward(&cache.biased, &g_act);
        let (g_emb_w, g_emb_b) = channel_bias_backward(&g_biased, &cache.emb);
        let (g_in_gn, g_scale, g_shift) = group_norm_backward(
            &cache.input,
            &t[base_idx + BLK_NORM_SCALE],
            &cache.gn,
            &g_biased,
        );
        accumulate(&mut grads.tensors[base_idx + BLK_CONV_W], &g_conv_w);
        accumulate(&mut grads.tensors[base_idx + BLK_CONV_B], &g_conv_b);
        accumulate(&mut grads.tensors[base_idx + BLK_EMB_W], &g_emb_w);
        accumulate(&mut grads.tensors[base_idx + BLK_EMB_B], &g_emb_b);
        accumulate(&mut grads.tensors[base_idx + BLK_NORM_SCALE], &g_scale);
        accumulate(&mut grads.tensors[base_idx + BLK_NORM_SHIFT], &g_shift);

        // residual: gradient flows both through the block and around it
        let mut g_x = g_in_gn;
        for (g, &go) in g_x.data_mut().iter_mut().zip(grad_out.data()) {
            *g += go;
        }
        g_x
    }

    /// Forward pass keeping every activation needed by `backward`.
    pub fn forward_cached(
        &self,
        y: &Tensor,
        cond: &Tensor,
        gamma: f64,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_shapes(y, cond)?;
        let t = &self.params.tensors;
        let emb = gamma_embedding(gamma, self.cfg.freq_features);

        let (n, h, w) = (self.cfg.in_channels, y.shape()[1], y.shape()[2]);
        let mut x_in = Tensor::zeros(&[3 * n, h, w]);
        x_in.data_mut()[..n * h * w].copy_from_slice(y.data());
        x_in.data_mut()[n * h * w..].copy_from_slice(cond.data());

        let a0 = conv3x3_forward(&x_in, &t[CONV_IN_W], &t[CONV_IN_B], 1);
        let (a1, enc) = self.block_forward(ENC, &a0, &emb);
        let d = conv3x3_forward(&a1, &t[DOWN_W], &t[DOWN_B], 2);
        let (m, mid) = self.block_forward(MID, &d, &emb);
        let u0 = nearest_up2_forward(&m);
        let u1 = conv3x3_forward(&u0, &t[UP_W], &t[UP_B], 1);
        let mut skip = u1;
        for (s, &a) in skip.data_mut().iter_mut().zip(a1.data()) {
            *s += a;
        }
        let (a2, dec) = self.block_forward(DEC, &skip, &emb);
        let out = conv3x3_forward(&a2, &t[OUT_W], &t[OUT_B], 1);

        Ok((
            out,
            ForwardCache {
                x_in,
                enc,
                a1,
                mid,
                u0,
                dec,
                a2,
            },
        ))
    }

    /// Plain forward pass.
    pub fn forward(&self, y: &Tensor, cond: &Tensor, gamma: f64) -> Result<Tensor> {
        Ok(self.forward_cached(y, cond, gamma)?.0)
    }

    /// Exact reverse-mode gradients of a scalar loss w.r.t. every
    /// parameter, given dLoss/dOutput.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor) -> TensorSet {
        let t = &self.params.tensors;
        let mut grads = TensorSet::zeros_like(&self.params);

        let (g_a2, g_out_w, g_out_b) = conv3x3_backward(&cache.a2, &t[OUT_W], grad_out, 1, true);
        accumulate(&mut grads.tensors[OUT_W], &g_out_w);
        accumulate(&mut grads.tensors[OUT_B], &g_out_b);

        let g_skip = self.block_backward(DEC, &cache.dec, &g_a2, &mut grads);

        let (g_u0, g_up_w, g_up_b) = conv3x3_backward(&cache.u0, &t[UP_W], &g_skip, 1, true);
        accumulate(&mut grads.tensors[UP_W], &g_up_w);
        accumulate(&mut grads.tensors[UP_B], &g_up_b);
        let g_m = nearest_up2_backward(&g_u0);

        let g_d = self.block_backward(MID, &cache.mid, &g_m, &mut grads);

        let (g_a1_down, g_down_w, g_down_b) =
            conv3x3_backward(&cache.a1, &t[DOWN_W], &g_d, 2, true);
        accumulate(&mut grads.tensors[DOWN_W], &g_down_w);
        accumulate(&mut grads.tensors[DOWN_B], &g_down_b);

        // a1 feeds both the down conv and the skip connection
        let mut g_a1 = g_a1_down;
        for (g, &s) in g_a1.data_mut().iter_mut().zip(g_skip.data()) {
            *g += s;
        }

        let g_a0 = self.block_backward(ENC, &cache.enc, &g_a1, &mut grads);

        let (_, g_in_w, g_in_b) = conv3x3_backward(&cache.x_in, &t[CONV_IN_W], &g_a0, 1, false);
        accumulate(&mut grads.tensors[CONV_IN_W], &g_in_w);
        accumulate(&mut grads.tensors[CONV_IN_B], &g_in_b);

        grads
    }

    /// Raster-boundary forward: converts f32 rasters in and out.
    pub fn predict_raster(
        &self,
        y_noisy: &RasterImage,
        condition: &RasterImage,
        gamma: f64,
    ) -> Result<RasterImage> {
        let y = Tensor::from_raster(y_noisy);
        let c = Tensor::from_raster(condition);
        self.forward(&y, &c, gamma)?.to_raster()
    }
}

impl EpsilonModel for Denoiser {
    fn predict(
        &self,
        y_noisy: &RasterImage,
        condition: &RasterImage,
        gamma: f64,
    ) -> Result<RasterImage> {
        self.predict_raster(y_noisy, condition, gamma)
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}
