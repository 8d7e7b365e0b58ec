//! Layer primitives with explicit reverse-mode gradients: 3x3
//! convolutions (stride 1 and 2, reflect padding), group normalization,
//! SiLU, nearest-neighbor upsampling and the per-channel noise-level
//! bias. Every backward here is pinned by finite-difference tests.

use crate::nn::tensor::Tensor;
use crate::raster::reflect_index;

#[inline]
fn r(i: isize, n: usize) -> usize {
    reflect_index(i, n)
}

/// 3x3 convolution, reflect-padded. `stride` is 1 (same size) or 2
/// (halved size; input dims must be even).
pub fn conv3x3_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oc = weight.shape()[0];
    debug_assert_eq!(weight.shape(), &[oc, ic, 3, 3]);
    debug_assert!(stride == 1 || stride == 2);
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Tensor::zeros(&[oc, oh, ow]);

    if stride == 1 && w >= 2 {
        for o in 0..oc {
            out.plane_mut(o).fill(bias.data()[o]);
            for i in 0..ic {
                let ip = input.plane(i);
                for ky in 0..3usize {
                    let wv = &weight.data()[((o * ic + i) * 3 + ky) * 3..][..3];
                    let (w0, w1, w2) = (wv[0], wv[1], wv[2]);
                    let op = out.plane_mut(o);
                    for y in 0..h {
                        let sy = r(y as isize + ky as isize - 1, h);
                        let row = &ip[sy * w..(sy + 1) * w];
                        let orow = &mut op[y * w..(y + 1) * w];
                        orow[0] += w0 * row[r(-1, w)] + w1 * row[0] + w2 * row[1];
                        for x in 1..w - 1 {
                            orow[x] += w0 * row[x - 1] + w1 * row[x] + w2 * row[x + 1];
                        }
                        orow[w - 1] +=
                            w0 * row[w - 2] + w1 * row[w - 1] + w2 * row[r(w as isize, w)];
                    }
                }
            }
        }
    } else {
        for o in 0..oc {
            out.plane_mut(o).fill(bias.data()[o]);
            for i in 0..ic {
                let ip = input.plane(i);
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3usize {
                            let sy = r((yo * stride) as isize + ky as isize - 1, h);
                            for kx in 0..3usize {
                                let sx = r((xo * stride) as isize + kx as isize - 1, w);
                                acc += ip[sy * w + sx]
                                    * weight.data()[(((o * ic + i) * 3 + ky) * 3) + kx];
                            }
                        }
                        out.plane_mut(o)[yo * ow + xo] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a 3x3 convolution. Returns (grad_input, grad_weight,
/// grad_bias); pass `need_grad_input = false` at the network entry to
/// skip the unused input gradient.
pub fn conv3x3_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    need_grad_input: bool,
) -> (Tensor, Tensor, Tensor) {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oc = weight.shape()[0];
    let (oh, ow) = (h / stride, w / stride);
    debug_assert_eq!(grad_out.shape(), &[oc, oh, ow]);

    let mut g_in = Tensor::zeros(&[ic, h, w]);
    let mut g_w = Tensor::zeros(&[oc, ic, 3, 3]);
    let mut g_b = Tensor::zeros(&[oc]);

    for o in 0..oc {
        g_b.data_mut()[o] = grad_out.plane(o).iter().sum();
    }

    if stride == 1 && w >= 2 {
        for o in 0..oc {
            let gp = grad_out.plane(o);
            for i in 0..ic {
                let ip = input.plane(i);
                for ky in 0..3usize {
                    let mut acc = [0.0f64; 3];
                    for y in 0..h {
                        let sy = r(y as isize + ky as isize - 1, h);
                        let row = &ip[sy * w..(sy + 1) * w];
                        let g = &gp[y * w..(y + 1) * w];
                        // kx = 0: source x-1
                        let mut s0 = g[0] * row[r(-1, w)];
                        for x in 1..w {
                            s0 += g[x] * row[x - 1];
                        }
                        // kx = 1: aligned
                        let mut s1 = 0.0;
                        for x in 0..w {
                            s1 += g[x] * row[x];
                        }
                        // kx = 2: source x+1
                        let mut s2 = g[w - 1] * row[r(w as isize, w)];
                        for x in 0..w - 1 {
                            s2 += g[x] * row[x + 1];
                        }
                        acc[0] += s0;
                        acc[1] += s1;
                        acc[2] += s2;
                    }
                    let base = ((o * ic + i) * 3 + ky) * 3;
                    g_w.data_mut()[base] += acc[0];
                    g_w.data_mut()[base + 1] += acc[1];
                    g_w.data_mut()[base + 2] += acc[2];
                }
            }
        }
        if need_grad_input {
            for o in 0..oc {
                let gp = grad_out.plane(o).to_vec();
                for i in 0..ic {
                    for ky in 0..3usize {
                        let wv = &weight.data()[((o * ic + i) * 3 + ky) * 3..][..3];
                        let (w0, w1, w2) = (wv[0], wv[1], wv[2]);
                        let gip = g_in.plane_mut(i);
                        for y in 0..h {
                            let sy = r(y as isize + ky as isize - 1, h);
                            let g = &gp[y * w..(y + 1) * w];
                            let grow = &mut gip[sy * w..(sy + 1) * w];
                            // kx = 0 sends g[x] to x-1
                            grow[r(-1, w)] += w0 * g[0];
                            for x in 1..w {
                                grow[x - 1] += w0 * g[x];
                            }
                            // kx = 1 aligned
                            for x in 0..w {
                                grow[x] += w1 * g[x];
                            }
                            // kx = 2 sends g[x] to x+1
                            for x in 0..w - 1 {
                                grow[x + 1] += w2 * g[x];
                            }
                            grow[r(w as isize, w)] += w2 * g[w - 1];
                        }
                    }
                }
            }
        }
    } else {
        for o in 0..oc {
            for i in 0..ic {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let g = grad_out.plane(o)[yo * ow + xo];
                        for ky in 0..3usize {
                            let sy = r((yo * stride) as isize + ky as isize - 1, h);
                            for kx in 0..3usize {
                                let sx = r((xo * stride) as isize + kx as isize - 1, w);
                                let widx = ((o * ic + i) * 3 + ky) * 3 + kx;
                                g_w.data_mut()[widx] += g * input.plane(i)[sy * w + sx];
                                if need_grad_input {
                                    g_in.plane_mut(i)[sy * w + sx] += g * weight.data()[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Cached statistics from a group-norm forward pass.
pub struct GroupNormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Picks the channel grouping: the largest divisor of `channels` that
/// is at most 8.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

pub fn group_norm_forward(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    groups: usize,
) -> (Tensor, GroupNormCache) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    debug_assert_eq!(c % groups, 0);
    let gs = c / groups; // channels per group
    let n = (gs * h * w) as f64;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut mean = vec![0.0; groups];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let chans = g * gs..(g + 1) * gs;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for ch in chans.clone() {
            for &v in input.plane(ch) {
                sum += v;
                sq += v * v;
            }
        }
        let mu = sum / n;
        let var = (sq / n - mu * mu).max(0.0);
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        mean[g] = mu;
        inv_std[g] = inv;
        for ch in chans {
            let (sc, sh) = (scale.data()[ch], shift.data()[ch]);
            let ip = input.plane(ch);
            let op = out.plane_mut(ch);
            for (o, &v) in op.iter_mut().zip(ip) {
                *o = sc * ((v - mu) * inv) + sh;
            }
        }
    }
    (
        out,
        GroupNormCache {
            mean,
            inv_std,
            groups,
        },
    )
}

pub fn group_norm_backward(
    input: &Tensor,
    scale: &Tensor,
    cache: &GroupNormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let groups = cache.groups;
    let gs = c / groups;
    let n = (gs * h * w) as f64;
    let mut g_in = Tensor::zeros(&[c, h, w]);
    let mut g_scale = Tensor::zeros(&[c]);
    let mut g_shift = Tensor::zeros(&[c]);

    for g in 0..groups {
        let (mu, inv) = (cache.mean[g], cache.inv_std[g]);
        let chans = g * gs..(g + 1) * gs;

        // accumulate the two reductions over the group
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in chans.clone() {
            let sc = scale.data()[ch];
            let ip = input.plane(ch);
            let gp = grad_out.plane(ch);
            let mut dsc = 0.0;
            let mut dsh = 0.0;
            for (&v, &go) in ip.iter().zip(gp) {
                let xhat = (v - mu) * inv;
                let dxhat = go * sc;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dsc += go * xhat;
                dsh += go;
            }
            g_scale.data_mut()[ch] = dsc;
            g_shift.data_mut()[ch] = dsh;
        }

        for ch in chans {
            let sc = scale.data()[ch];
            let ip = input.plane(ch);
            let gp = grad_out.plane(ch);
            let op = g_in.plane_mut(ch);
            for ((o, &v), &go) in op.iter_mut().zip(ip).zip(gp) {
                let xhat = (v - mu) * inv;
                let dxhat = go * sc;
                *o = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (g_in, g_scale, g_shift)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v *= sigmoid(*v);
    }
    out
}

pub fn silu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        let s = sigmoid(x);
        *gv *= s * (1.0 + x * (1.0 - s));
    }
    g
}

/// Nearest-neighbor 2x upsampling.
pub fn nearest_up2_forward(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        let ip = input.plane(ch);
        let op = out.plane_mut(ch);
        for y in 0..2 * h {
            let sy = y / 2;
            for x in 0..2 * w {
                op[y * 2 * w + x] = ip[sy * w + x / 2];
            }
        }
    }
    out
}

pub fn nearest_up2_backward(grad_out: &Tensor) -> Tensor {
    let (c, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let gp = grad_out.plane(ch);
        let op = g.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                op[(y / 2) * w + x / 2] += gp[y * ow + x];
            }
        }
    }
    g
}

/// Adds a per-channel bias computed as `weight . emb + bias` to every
/// spatial position; this is how the noise level enters each block.
pub fn channel_bias_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, emb: &[f64]) -> Tensor {
    let c = input.shape()[0];
    let k = emb.len();
    debug_assert_eq!(weight.shape(), &[c, k]);
    let mut out = input.clone();
    for ch in 0..c {
        let row = &weight.data()[ch * k..(ch + 1) * k];
        let b: f64 = bias.data()[ch] + row.iter().zip(emb).map(|(a, e)| a * e).sum::<f64>();
        for v in out.plane_mut(ch) {
            *v += b;
        }
    }
    out
}

/// Gradients of [`channel_bias_forward`] w.r.t. the projection weight
/// and bias. The input gradient is the upstream gradient unchanged.
pub fn channel_bias_backward(grad_out: &Tensor, emb: &[f64]) -> (Tensor, Tensor) {
    let c = grad_out.shape()[0];
    let k = emb.len();
    let mut g_w = Tensor::zeros(&[c, k]);
    let mut g_b = Tensor::zeros(&[c]);
    for ch in 0..c {
        let s: f64 = grad_out.plane(ch).iter().sum();
        g_b.data_mut()[ch] = s;
        for (j, &e) in emb.iter().enumerate() {
            g_w.data_mut()[ch * k + j] = s * e;
        }
    }
    (g_w, g_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Scalar probe loss: weighted sum of the output, with fixed random
    /// weights, so dL/dout is a known tensor.
    fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        rand_tensor(rng, shape)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn fd_check(analytic: &Tensor, param: &mut Tensor, mut eval: impl FnMut(&Tensor) -> f64) {
        let h = 1e-5;
        for i in 0..param.len() {
            let orig = param.data()[i];
            param.data_mut()[i] = orig + h;
            let lp = eval(param);
            param.data_mut()[i] = orig - h;
            let lm = eval(param);
            param.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((a - numeric) / denom).abs() < 1e-3,
                "index {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv3x3_stride1_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[2, 5, 6]);
        let mut weight = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut bias = rand_tensor(&mut rng, &[3]);
        let up = probe(&mut rng, &[3, 5, 6]);

        let (g_in, g_w, g_b) = conv3x3_backward(&input, &weight, &up, 1, true);

        fd_check(&g_w, &mut weight, |wt| {
            dot(&conv3x3_forward(&input, wt, &bias, 1), &up)
        });
        let w_fixed = weight.clone();
        fd_check(&g_b, &mut bias, |b| {
            dot(&conv3x3_forward(&input, &w_fixed, b, 1), &up)
        });
        let b_fixed = bias.clone();
        let mut inp = input.clone();
        fd_check(&g_in, &mut inp, |i| {
            dot(&conv3x3_forward(i, &w_fixed, &b_fixed, 1), &up)
        });
    }

    #[test]
    fn conv3x3_stride2_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[2, 6, 4]);
        let mut weight = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[2]);
        let up = probe(&mut rng, &[2, 3, 2]);

        let (g_in, g_w, _) = conv3x3_backward(&input, &weight, &up, 2, true);
        fd_check(&g_w, &mut weight, |wt| {
            dot(&conv3x3_forward(&input, wt, &bias, 2), &up)
        });
        let w_fixed = weight.clone();
        let mut inp = input.clone();
        fd_check(&g_in, &mut inp, |i| {
            dot(&conv3x3_forward(i, &w_fixed, &bias, 2), &up)
        });
    }

    #[test]
    fn group_norm_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, &[4, 3, 3]);
        let mut scale = rand_tensor(&mut rng, &[4]);
        let mut shift = rand_tensor(&mut rng, &[4]);
        let up = probe(&mut rng, &[4, 3, 3]);
        let groups = 2;

        let (_, cache) = group_norm_forward(&input, &scale, &shift, groups);
        let (g_in, g_scale, g_shift) = group_norm_backward(&input, &scale, &cache, &up);

        let sh_fixed = shift.clone();
        fd_check(&g_scale, &mut scale, |s| {
            dot(&group_norm_forward(&input, s, &sh_fixed, groups).0, &up)
        });
        let sc_fixed = scale.clone();
        fd_check(&g_shift, &mut shift, |s| {
            dot(&group_norm_forward(&input, &sc_fixed, s, groups).0, &up)
        });
        let sh_fixed = shift.clone();
        let mut inp = input.clone();
        fd_check(&g_in, &mut inp, |i| {
            dot(&group_norm_forward(i, &sc_fixed, &sh_fixed, groups).0, &up)
        });
    }

    #[test]
    fn silu_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut input = rand_tensor(&mut rng, &[2, 4, 4]);
        let up = probe(&mut rng, &[2, 4, 4]);
        let g = silu_backward(&input, &up);
        fd_check(&g, &mut input, |i| dot(&silu_forward(i), &up));
    }

    #[test]
    fn upsample_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut input = rand_tensor(&mut rng, &[2, 3, 2]);
        let up = probe(&mut rng, &[2, 6, 4]);
        let g = nearest_up2_backward(&up);
        fd_check(&g, &mut input, |i| dot(&nearest_up2_forward(i), &up));
    }

    #[test]
    fn channel_bias_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut weight = rand_tensor(&mut rng, &[3, 5]);
        let mut bias = rand_tensor(&mut rng, &[3]);
        let emb: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up = probe(&mut rng, &[3, 4, 4]);

        let (g_w, g_b) = channel_bias_backward(&up, &emb);
        fd_check(&g_w, &mut weight, |wt| {
            dot(&channel_bias_forward(&input, wt, &bias, &emb), &up)
        });
        let w_fixed = weight.clone();
        fd_check(&g_b, &mut bias, |b| {
            dot(&channel_bias_forward(&input, &w_fixed, b, &emb), &up)
        });
    }

    #[test]
    fn conv_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, &[2, 4, 4]);
        let weight = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let zero = Tensor::zeros(&[2, 4, 4]);
        let (g_in, g_w, g_b) = conv3x3_backward(&input, &weight, &zero, 1, true);
        assert!(g_in.data().iter().all(|&v| v == 0.0));
        assert!(g_w.data().iter().all(|&v| v == 0.0));
        assert!(g_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(64), 8);
        assert_eq!(group_count(4), 4);
        assert_eq!(group_count(6), 6);
        assert_eq!(group_count(3), 3);
        assert_eq!(group_count(7), 7);
        assert_eq!(group_count(9), 3);
    }

    #[test]
    fn fast_and_general_conv_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = rand_tensor(&mut rng, &[2, 4, 5]);
        let weight = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        let fast = conv3x3_forward(&input, &weight, &bias, 1);

        // direct reflected gather, one tap at a time
        let mut direct = Tensor::zeros(&[3, 4, 5]);
        for o in 0..3 {
            for y in 0..4isize {
                for x in 0..5isize {
                    let mut acc = bias.data()[o];
                    for i in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = r(y + ky - 1, 4);
                                let sx = r(x + kx - 1, 5);
                                acc += input.plane(i)[sy * 5 + sx]
                                    * weight.data()
                                        [((o * 2 + i) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                    direct.plane_mut(o)[(y * 5 + x) as usize] = acc;
                }
            }
        }
        for (a, b) in fast.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
