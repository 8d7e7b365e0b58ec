//! Bicubic (Catmull-Rom) resampling with reflect boundary handling.

use crate::error::{Error, Result};
use crate::raster::{reflect_index, RasterImage};

/// Catmull-Rom cubic kernel (a = -0.5). Zero outside |x| >= 2 and the
/// four taps of any phase sum to 1.
#[inline]
pub(crate) fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Maps an output coordinate onto the source axis. Endpoints align with
/// endpoints, so an identity resize is exact and a ramp keeps its
/// boundary values.
#[inline]
fn source_coord(dst: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) * 0.5
    } else {
        dst as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

struct AxisTaps {
    // per output coordinate: 4 source indices (already reflected) + weights
    idx: Vec<[usize; 4]>,
    wgt: Vec<[f64; 4]>,
}

fn axis_taps(n_in: usize, n_out: usize) -> AxisTaps {
    let mut idx = Vec::with_capacity(n_out);
    let mut wgt = Vec::with_capacity(n_out);
    for d in 0..n_out {
        let src = source_coord(d, n_in, n_out);
        let base = src.floor() as isize;
        let mut ids = [0usize; 4];
        let mut ws = [0f64; 4];
        for (k, (id, wv)) in ids.iter_mut().zip(ws.iter_mut()).enumerate() {
            let tap = base - 1 + k as isize;
            *id = reflect_index(tap, n_in);
            *wv = catmull_rom(src - tap as f64);
        }
        idx.push(ids);
        wgt.push(ws);
    }
    AxisTaps { idx, wgt }
}

/// Resizes to `out_h x out_w` with the Catmull-Rom kernel, separably per
/// axis, reflecting at the borders. Constant inputs stay constant.
pub fn bicubic_resize(image: &RasterImage, out_h: usize, out_w: usize) -> Result<RasterImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "zero-sized resize target {out_h}x{out_w}"
        )));
    }
    let (n_ch, in_h, in_w) = image.shape();
    let hx = axis_taps(in_w, out_w);
    let vx = axis_taps(in_h, out_h);

    // horizontal pass in f64, keeping full rows
    let mut mid = vec![0f64; n_ch * in_h * out_w];
    for c in 0..n_ch {
        let plane = image.channel(c);
        for y in 0..in_h {
            let row = &plane[y * in_w..(y + 1) * in_w];
            let out_row = &mut mid[(c * in_h + y) * out_w..(c * in_h + y + 1) * out_w];
            for (x, out) in out_row.iter_mut().enumerate() {
                let ids = &hx.idx[x];
                let ws = &hx.wgt[x];
                *out = f64::from(row[ids[0]]) * ws[0]
                    + f64::from(row[ids[1]]) * ws[1]
                    + f64::from(row[ids[2]]) * ws[2]
                    + f64::from(row[ids[3]]) * ws[3];
            }
        }
    }

    // vertical pass
    let mut data = vec![0f32; n_ch * out_h * out_w];
    for c in 0..n_ch {
        for y in 0..out_h {
            let ids = &vx.idx[y];
            let ws = &vx.wgt[y];
            let rows: [&[f64]; 4] = [
                &mid[(c * in_h + ids[0]) * out_w..(c * in_h + ids[0] + 1) * out_w],
                &mid[(c * in_h + ids[1]) * out_w..(c * in_h + ids[1] + 1) * out_w],
                &mid[(c * in_h + ids[2]) * out_w..(c * in_h + ids[2] + 1) * out_w],
                &mid[(c * in_h + ids[3]) * out_w..(c * in_h + ids[3] + 1) * out_w],
            ];
            let out_row = &mut data[(c * out_h + y) * out_w..(c * out_h + y + 1) * out_w];
            for (x, out) in out_row.iter_mut().enumerate() {
                let acc = rows[0][x] * ws[0]
                    + rows[1][x] * ws[1]
                    + rows[2][x] * ws[2]
                    + rows[3][x] * ws[3];
                *out = acc as f32;
            }
        }
    }
    RasterImage::new(n_ch, out_h, out_w, data)
}
