//! Targetless change detection: outlier clipping, Gaussian smoothing,
//! standardized squared difference, global thresholding, per-pixel
//! windowed Otsu, and DBSCAN noise removal, plus DR/FAR metrics and the
//! ROC sweep over the global threshold.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{reflect_index, RasterImage};

#[derive(Debug, Clone, Copy)]
pub struct ChangeDetConfig {
    /// Global threshold on the difference image, in [0, 1].
    pub omega: f64,
    pub w_gauss: usize,
    pub w_otsu: usize,
    /// Maximum Euclidean distance between pixels of a cluster.
    pub e_max: f64,
    /// Minimum neighborhood size for a core pixel (the pixel counts).
    pub n_min: usize,
    pub otsu_bins: usize,
}

impl Default for ChangeDetConfig {
    fn default() -> Self {
        Self {
            omega: 0.05,
            w_gauss: 11,
            w_otsu: 1023,
            e_max: 5.0,
            n_min: 48,
            otsu_bins: 256,
        }
    }
}

impl ChangeDetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!(
                "omega {} outside [0,1]",
                self.omega
            )));
        }
        if self.w_gauss.is_multiple_of(2) || self.w_otsu.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "gaussian and otsu windows must be odd".into(),
            ));
        }
        if self.e_max <= 0.0 {
            return Err(Error::InvalidArgument("e_max must be positive".into()));
        }
        if self.n_min == 0 {
            return Err(Error::InvalidArgument("n_min must be at least 1".into()));
        }
        if self.otsu_bins < 2 {
            return Err(Error::InvalidArgument("need at least 2 otsu bins".into()));
        }
        Ok(())
    }
}

/// Binary h x w map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nonzero samples of a single-channel raster become positives.
    pub fn from_raster(img: &RasterImage) -> Result<Self> {
        if img.n_ch() != 1 {
            return Err(Error::InvalidArgument(format!(
                "mask raster must have 1 channel, got {}",
                img.n_ch()
            )));
        }
        Ok(Self {
            h: img.h(),
            w: img.w(),
            data: img.data().iter().map(|&v| v != 0.0).collect(),
        })
    }

    pub fn to_raster(&self) -> RasterImage {
        let data = self
            .data
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        RasterImage::new(1, self.h, self.w, data).expect("mask raster")
    }
}

/// Final detection result: the cleaned binary mask, DBSCAN labels
/// (-1 marks noise/background), and the pre-threshold difference image.
#[derive(Debug, Clone)]
pub struct ChangeMap {
    pub mask: Mask,
    pub labels: Vec<i32>,
    pub cluster_count: usize,
    pub diff: RasterImage,
}

/// Separable Gaussian with an explicit sigma, reflect boundaries,
/// kernel normalized to sum 1.
pub(crate) fn gaussian_blur_sigma(image: &RasterImage, window: usize, sigma: f64) -> RasterImage {
    let radius = (window - 1) / 2;
    let mut kernel = Vec::with_capacity(window);
    for i in 0..window {
        let d = i as f64 - radius as f64;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (n_ch, h, w) = image.shape();
    // horizontal pass
    let mut mid = vec![0f64; n_ch * h * w];
    for c in 0..n_ch {
        let plane = image.channel(c);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - radius as isize, w);
                    acc += f64::from(row[sx]) * kv;
                }
                mid[(c * h + y) * w + x] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0f32; n_ch * h * w];
    for c in 0..n_ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius as isize, h);
                    acc += mid[(c * h + sy) * w + x] * kv;
                }
                out[(c * h + y) * w + x] = acc as f32;
            }
        }
    }
    RasterImage::new(n_ch, h, w, out).expect("blurred samples finite")
}

/// Gaussian blur with sigma tied to the window width:
/// sigma = 0.3 * ((w - 1)/2 - 1) + 0.8 (2.0 for the default w = 11).
pub fn gaussian_blur(image: &RasterImage, window: usize) -> Result<RasterImage> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::InvalidArgument(format!(
            "blur window {window} must be odd"
        )));
    }
    let sigma = 0.3 * (((window - 1) as f64) / 2.0 - 1.0) + 0.8;
    Ok(gaussian_blur_sigma(image, window, sigma))
}

fn global_mean_std(img: &RasterImage) -> (f64, f64) {
    let n = img.data().len() as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for &v in img.data() {
        let v = f64::from(v);
        sum += v;
        sq += v * v;
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Clips samples above mean + 6 std (scalar stats over the whole tensor).
fn clip_outliers(img: &RasterImage) -> RasterImage {
    let (mean, std) = global_mean_std(img);
    let cap = (mean + 6.0 * std) as f32;
    let data = img.data().iter().map(|&v| v.min(cap)).collect();
    RasterImage::new(img.n_ch(), img.h(), img.w(), data).expect("clipped finite")
}

/// Min-max rescale onto [0, 1]; constant images map to zero.
fn min_max_scale(img: &RasterImage) -> RasterImage {
    let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let data = img.data().iter().map(|&v| (v - lo) / range).collect();
    RasterImage::new(img.n_ch(), img.h(), img.w(), data).expect("scaled finite")
}

/// Global standardization; a zero-variance image passes through with
/// the mean removed (std treated as 1).
fn standardize(img: &RasterImage) -> RasterImage {
    let (mean, std) = global_mean_std(img);
    let std = if std > 0.0 { std } else { 1.0 };
    let data = img
        .data()
        .iter()
        .map(|&v| ((f64::from(v) - mean) / std) as f32)
        .collect();
    RasterImage::new(img.n_ch(), img.h(), img.w(), data).expect("standardized finite")
}

/// Single-channel difference image in [0, 1]: clip, blur normalized
/// images, standardize, squared difference, channel mean, rescale.
pub fn difference_image(
    pre: &RasterImage,
    post: &RasterImage,
    cfg: &ChangeDetConfig,
) -> Result<RasterImage> {
    if pre.shape() != post.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pre.shape()),
            got: format!("{:?}", post.shape()),
        });
    }
    cfg.validate()?;
    let prep = |img: &RasterImage| -> Result<RasterImage> {
        let clipped = clip_outliers(img);
        let blurred = gaussian_blur(&min_max_scale(&clipped), cfg.w_gauss)?;
        Ok(standardize(&blurred))
    };
    let a = prep(pre)?;
    let b = prep(post)?;

    let (n_ch, h, w) = a.shape();
    let mut diff = vec![0f32; h * w];
    for c in 0..n_ch {
        let pa = a.channel(c);
        let pb = b.channel(c);
        for i in 0..h * w {
            let d = f64::from(pb[i]) - f64::from(pa[i]);
            diff[i] += (d * d / n_ch as f64) as f32;
        }
    }
    let raw = RasterImage::new(1, h, w, diff)?;
    Ok(min_max_scale(&raw))
}

/// Heaviside masking: values below omega become 0, values at or above
/// it are kept (H(0) = 1).
pub fn global_threshold(diff: &RasterImage, omega: f64) -> RasterImage {
    let omega = omega as f32;
    let data = diff
        .data()
        .iter()
        .map(|&v| if v >= omega { v } else { 0.0 })
        .collect();
    RasterImage::new(diff.n_ch(), diff.h(), diff.w(), data).expect("thresholded finite")
}

#[inline]
fn bin_of(v: f32, bins: usize) -> usize {
    let b = (f64::from(v.clamp(0.0, 1.0)) * bins as f64) as usize;
    b.min(bins - 1)
}

/// Otsu threshold over a histogram: the split bin maximizing
/// between-class variance, ties resolved toward the lowest bin. Returns
/// None for single-bin (homogeneous) windows.
fn otsu_split(hist: &[u32], total: u64) -> Option<usize> {
    let nonzero = hist.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return None;
    }
    let sum_all: i64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as i64 * i64::from(c))
        .sum();
    let mut w_b: i64 = 0;
    let mut s_b: i64 = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_t = 0usize;
    for t in 0..hist.len() - 1 {
        w_b += i64::from(hist[t]);
        s_b += t as i64 * i64::from(hist[t]);
        if w_b == 0 {
            continue;
        }
        let w_f = total as i64 - w_b;
        if w_f == 0 {
            break;
        }
        // between-class variance up to a constant factor:
        // (S_b * w_f - S_f * w_b)^2 / (w_b * w_f)
        let a = s_b * w_f - (sum_all - s_b) * w_b;
        let score = (a as f64) * (a as f64) / ((w_b as f64) * (w_f as f64));
        if score > best_score {
            best_score = score;
            best_t = t;
        }
    }
    Some(best_t)
}

/// Per-pixel Otsu thresholding over a sliding reflect-padded window.
///
/// Column histograms plus an incremental window histogram make the cost
/// O(bins) per pixel independently of the window size. A pixel is
/// positive iff its bin exceeds the local split bin; homogeneous
/// windows are wholly negative.
pub fn windowed_otsu(diff: &RasterImage, w_otsu: usize, bins: usize) -> Result<Mask> {
    if w_otsu.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "otsu window {w_otsu} must be odd"
        )));
    }
    if diff.n_ch() != 1 {
        return Err(Error::InvalidArgument(
            "windowed otsu expects a single channel".into(),
        ));
    }
    let (h, w) = (diff.h(), diff.w());
    let radius = (w_otsu - 1) as isize / 2;
    let total = (w_otsu * w_otsu) as u64;

    // pixel bins
    let binned: Vec<u16> = diff
        .data()
        .iter()
        .map(|&v| bin_of(v, bins) as u16)
        .collect();

    // per-column histogram over the vertical window centered on row 0
    let mut colhist = vec![0u32; w * bins];
    for c in 0..w {
        for dy in -radius..=radius {
            let sy = reflect_index(dy, h);
            colhist[c * bins + binned[sy * w + c] as usize] += 1;
        }
    }

    let mut out = Mask::new(h, w);
    let mut winhist = vec![0u32; bins];
    for r in 0..h {
        if r > 0 {
            // slide the vertical window down one row
            let drop = reflect_index(r as isize - 1 - radius, h);
            let add = reflect_index(r as isize + radius, h);
            for c in 0..w {
                colhist[c * bins + binned[drop * w + c] as usize] -= 1;
                colhist[c * bins + binned[add * w + c] as usize] += 1;
            }
        }
        // window histogram for column 0
        winhist.fill(0);
        for dc in -radius..=radius {
            let sc = reflect_index(dc, w);
            let base = sc * bins;
            for b in 0..bins {
                winhist[b] += colhist[base + b];
            }
        }
        for c in 0..w {
            if c > 0 {
                let drop = reflect_index(c as isize - 1 - radius, w) * bins;
                let add = reflect_index(c as isize + radius, w) * bins;
                for b in 0..bins {
                    winhist[b] -= colhist[drop + b];
                    winhist[b] += colhist[add + b];
                }
            }
            if let Some(t) = otsu_split(&winhist, total) {
                out.data[r * w + c] = (binned[r * w + c] as usize) > t;
            }
        }
    }
    Ok(out)
}

/// DBSCAN over the coordinates of positive pixels. Returns per-pixel
/// labels (-1 noise/background, 0.. clusters) and the cluster count.
/// Border pixels join the first core cluster that reaches them; the
/// scan runs in row-major order so labels are deterministic.
pub fn dbscan_labels(mask: &Mask, e_max: f64, n_min: usize) -> (Vec<i32>, usize) {
    let (h, w) = (mask.h, mask.w);
    let points: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| mask.data[i])
        .map(|i| (i / w, i % w))
        .collect();
    let mut labels_img = vec![-1i32; h * w];
    if points.is_empty() {
        return (labels_img, 0);
    }

    // bucket points into cells of side e_max for neighbor queries
    let cell = e_max.max(1e-9);
    let grid_h = (h as f64 / cell).floor() as usize + 1;
    let grid_w = (w as f64 / cell).floor() as usize + 1;
    let mut cells: Vec<Vec<u32>> = vec![Vec::new(); grid_h * grid_w];
    for (idx, &(r, c)) in points.iter().enumerate() {
        let gy = (r as f64 / cell) as usize;
        let gx = (c as f64 / cell) as usize;
        cells[gy * grid_w + gx].push(idx as u32);
    }
    let eps2 = e_max * e_max;
    let query = |idx: usize, out: &mut Vec<u32>| {
        out.clear();
        let (r, c) = points[idx];
        let gy = (r as f64 / cell) as usize;
        let gx = (c as f64 / cell) as usize;
        for dy in gy.saturating_sub(1)..=(gy + 1).min(grid_h - 1) {
            for dx in gx.saturating_sub(1)..=(gx + 1).min(grid_w - 1) {
                for &j in &cells[dy * grid_w + dx] {
                    let (rj, cj) = points[j as usize];
                    let dr = r as f64 - rj as f64;
                    let dc = c as f64 - cj as f64;
                    if dr * dr + dc * dc <= eps2 {
                        out.push(j);
                    }
                }
            }
        }
        out.sort_unstable();
    };

    let mut labels = vec![-1i32; points.len()];
    let mut visited = vec![false; points.len()];
    let mut cluster = 0i32;
    let mut neigh = Vec::new();
    let mut frontier = std::collections::VecDeque::new();

    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        query(i, &mut neigh);
        if neigh.len() < n_min {
            continue; // noise unless a later core point claims it
        }
        labels[i] = cluster;
        frontier.clear();
        frontier.extend(neigh.iter().copied());
        while let Some(j) = frontier.pop_front() {
            let j = j as usize;
            if labels[j] == -1 {
                labels[j] = cluster;
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            query(j, &mut neigh);
            if neigh.len() >= n_min {
                frontier.extend(neigh.iter().copied());
            }
        }
        cluster += 1;
    }

    for (idx, &(r, c)) in points.iter().enumerate() {
        labels_img[r * w + c] = labels[idx];
    }
    (labels_img, cluster as usize)
}

/// Removes noise-labeled pixels from a binary map.
pub fn dbscan_filter(mask: &Mask, e_max: f64, n_min: usize) -> (Mask, Vec<i32>, usize) {
    let (labels, clusters) = dbscan_labels(mask, e_max, n_min);
    let mut cleaned = Mask::new(mask.h, mask.w);
    for i in 0..mask.data.len() {
        cleaned.data[i] = mask.data[i] && labels[i] != -1;
    }
    (cleaned, labels, clusters)
}

/// Runs the detection stages on a precomputed difference image.
pub fn detect_from_diff(diff: &RasterImage, cfg: &ChangeDetConfig) -> Result<ChangeMap> {
    let masked = global_threshold(diff, cfg.omega);
    let otsu = windowed_otsu(&masked, cfg.w_otsu, cfg.otsu_bins)?;
    let (mask, labels, cluster_count) = dbscan_filter(&otsu, cfg.e_max, cfg.n_min);
    Ok(ChangeMap {
        mask,
        labels,
        cluster_count,
        diff: diff.clone(),
    })
}

/// Full pipeline on a co-registered pre/post pair.
pub fn detect_changes(
    pre: &RasterImage,
    post: &RasterImage,
    cfg: &ChangeDetConfig,
) -> Result<ChangeMap> {
    let diff = difference_image(pre, post, cfg)?;
    detect_from_diff(&diff, cfg)
}

/// Detection rate and false-alarm rate against a truth mask.
#[derive(Debug, Clone, Copy)]
pub struct DrFar {
    pub dr: f64,
    pub far: f64,
    /// False when the truth has no positive pixels (DR undefined).
    pub dr_defined: bool,
}

pub fn evaluate_dr_far(map: &Mask, truth: &Mask) -> Result<DrFar> {
    if map.h != truth.h || map.w != truth.w {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.h, truth.w),
            got: format!("{}x{}", map.h, map.w),
        });
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fng = 0u64;
    let mut tn = 0u64;
    for (&p, &t) in map.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fng += 1,
            (false, false) => tn += 1,
        }
    }
    let positives = tp + fng;
    let negatives = fp + tn;
    let dr_defined = positives > 0;
    let dr = if dr_defined {
        tp as f64 / positives as f64
    } else {
        f64::NAN
    };
    let far = if negatives > 0 {
        fp as f64 / negatives as f64
    } else {
        f64::NAN
    };
    Ok(DrFar {
        dr,
        far,
        dr_defined,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RocPoint {
    pub omega: f64,
    pub dr: f64,
    pub far: f64,
    pub neg_log10_far: f64,
}

/// Sweeps omega over 0.00..=1.00 in steps of 0.01 (101 rows). The
/// difference image is computed once; per-omega stages run in parallel.
pub fn roc_sweep(
    pre: &RasterImage,
    post: &RasterImage,
    truth: &Mask,
    cfg: &ChangeDetConfig,
) -> Result<Vec<RocPoint>> {
    let diff = difference_image(pre, post, cfg)?;
    let points: Result<Vec<RocPoint>> = (0..=100u32)
        .into_par_iter()
        .map(|i| {
            let omega = f64::from(i) / 100.0;
            let step_cfg = ChangeDetConfig { omega, ..*cfg };
            let map = detect_from_diff(&diff, &step_cfg)?;
            let m = evaluate_dr_far(&map.mask, truth)?;
            Ok(RocPoint {
                omega,
                dr: m.dr,
                far: m.far,
                neg_log10_far: -m.far.log10(),
            })
        })
        .collect();
    points
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("omega,dr,far,neg_log10_far\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.omega, p.dr, p.far, p.neg_log10_far
        ));
    }
    out
}

/// Truth-colored overlay: green true positives, red false positives,
/// blue false negatives on a black background.
pub fn overlay_image(map: &Mask, truth: &Mask) -> Result<RasterImage> {
    if map.h != truth.h || map.w != truth.w {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.h, truth.w),
            got: format!("{}x{}", map.h, map.w),
        });
    }
    let (h, w) = (map.h, map.w);
    let mut out = RasterImage::filled(3, h, w, -1.0);
    for i in 0..h * w {
        let (r, c) = (i / w, i % w);
        match (map.data[i], truth.data[i]) {
            (true, true) => out.set(1, r, c, 1.0),
            (true, false) => out.set(0, r, c, 1.0),
            (false, true) => out.set(2, r, c, 1.0),
            (false, false) => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raster(seed: u64, n_ch: usize, h: usize, w: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_ch * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        RasterImage::new(n_ch, h, w, data).unwrap()
    }

    #[test]
    fn blur_keeps_constants() {
        let img = RasterImage::filled(2, 16, 16, 0.42);
        let out = gaussian_blur(&img, 11).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
        assert!(gaussian_blur(&img, 10).is_err());
    }

    #[test]
    fn blur_impulse_reproduces_kernel() {
        let mut img = RasterImage::zeros(1, 21, 21);
        img.set(0, 10, 10, 1.0);
        let window = 5;
        let out = gaussian_blur(&img, window).unwrap();

        // direct evaluation of the separable kernel
        let sigma = 0.3 * ((window as f64 - 1.0) / 2.0 - 1.0) + 0.8;
        let mut k = Vec::new();
        for i in 0..window {
            let d = i as f64 - 2.0;
            k.push((-d * d / (2.0 * sigma * sigma)).exp());
        }
        let s: f64 = k.iter().sum();
        for kv in k.iter_mut() {
            *kv /= s;
        }
        for dy in 0..window {
            for dx in 0..window {
                let expect = (k[dy] * k[dx]) as f32;
                let got = out.get(0, 8 + dy, 8 + dx);
                assert!(
                    (got - expect).abs() < 1e-6,
                    "({dy},{dx}): {got} vs {expect}"
                );
            }
        }
        // mass conservation for an interior-supported impulse
        let total: f64 = out.data().iter().map(|&v| f64::from(v)).sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn identical_inputs_give_zero_difference() {
        let img = random_raster(1, 3, 32, 32);
        let cfg = ChangeDetConfig::default();
        let diff = difference_image(&img, &img, &cfg).unwrap();
        assert!(diff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outliers_are_clipped_before_anything_else() {
        let mut img = random_raster(2, 1, 32, 32);
        let (mean, std) = global_mean_std(&img);
        img.set(0, 5, 5, (mean + 10.0 * std) as f32);
        let clipped = clip_outliers(&img);
        let (m2, s2) = global_mean_std(&img);
        let cap = (m2 + 6.0 * s2) as f32;
        assert!(clipped.data().iter().all(|&v| v <= cap));
        assert!(clipped.get(0, 5, 5) <= cap);
    }

    #[test]
    fn blob_difference_is_maximal_inside_blob() {
        // shared mild texture, one bright blob added to the post image
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let data: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(0.18..0.22)).collect();
        let pre = RasterImage::new(1, 64, 64, data).unwrap();
        let mut post = pre.clone();
        for y in 24..40 {
            for x in 24..40 {
                post.set(0, y, x, 0.9);
            }
        }
        let cfg = ChangeDetConfig::default();
        let diff = difference_image(&pre, &post, &cfg).unwrap();
        let peak = diff
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let (py, px) = (peak.0 / 64, peak.0 % 64);
        assert!(
            (24..40).contains(&py) && (24..40).contains(&px),
            "peak at {py},{px}"
        );
        assert!(
            (diff.get(0, 31, 31) - 1.0).abs() < 0.2,
            "blob interior near max"
        );
    }

    #[test]
    fn threshold_keeps_at_or_above_omega() {
        let diff = RasterImage::new(1, 1, 3, vec![0.1, 0.5, 0.9]).unwrap();
        let out = global_threshold(&diff, 0.5);
        assert_eq!(out.data(), &[0.0, 0.5, 0.9]);
        let unchanged = global_threshold(&diff, 0.0);
        assert_eq!(unchanged.data(), diff.data());
        let none = global_threshold(&diff, 1.0 + 1e-6);
        assert!(none.data().iter().all(|&v| v == 0.0));
    }

    /// Brute-force oracle: gather the reflected window, build the same
    /// histogram, scan all split bins directly.
    fn otsu_oracle(diff: &RasterImage, w_otsu: usize, bins: usize) -> Mask {
        let (h, w) = (diff.h(), diff.w());
        let radius = (w_otsu as isize - 1) / 2;
        let mut out = Mask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let mut hist = vec![0u32; bins];
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sy = reflect_index(r as isize + dy, h);
                        let sx = reflect_index(c as isize + dx, w);
                        hist[bin_of(diff.get(0, sy, sx), bins)] += 1;
                    }
                }
                if hist.iter().filter(|&&v| v > 0).count() < 2 {
                    continue;
                }
                let total = (w_otsu * w_otsu) as i64;
                let sum_all: i64 = hist
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| i as i64 * i64::from(v))
                    .sum();
                let mut best = f64::NEG_INFINITY;
                let mut best_t = 0usize;
                let mut wb = 0i64;
                let mut sb = 0i64;
                for t in 0..bins - 1 {
                    wb += i64::from(hist[t]);
                    sb += t as i64 * i64::from(hist[t]);
                    if wb == 0 {
                        continue;
                    }
                    let wf = total - wb;
                    if wf == 0 {
                        break;
                    }
                    let a = sb * wf - (sum_all - sb) * wb;
                    let score = (a as f64) * (a as f64) / ((wb as f64) * (wf as f64));
                    if score > best {
                        best = score;
                        best_t = t;
                    }
                }
                out.data[r * w + c] = bin_of(diff.get(0, r, c), bins) > best_t;
            }
        }
        out
    }

    #[test]
    fn sliding_otsu_matches_oracle() {
        for seed in 0..3u64 {
            let img = random_raster(100 + seed, 1, 24, 17);
            for w_otsu in [7usize, 15] {
                let fast = windowed_otsu(&img, w_otsu, 256).unwrap();
                let slow = otsu_oracle(&img, w_otsu, 256);
                assert_eq!(fast, slow, "seed {seed} w {w_otsu}");
            }
        }
    }

    #[test]
    fn otsu_bimodal_window_splits_modes() {
        // one window of half 0.1 / half 0.9 values
        let mut data = vec![0.1f32; 100];
        for v in data.iter_mut().take(50) {
            *v = 0.9;
        }
        // deterministic arrangement: first 50 bright
        let img = RasterImage::new(1, 10, 10, data).unwrap();
        let mask = windowed_otsu(&img, 19, 256).unwrap(); // window covers all
        for i in 0..100 {
            let bright = img.data()[i] > 0.5;
            assert_eq!(mask.data[i], bright, "pixel {i}");
        }
    }

    #[test]
    fn otsu_all_zero_is_negative() {
        let img = RasterImage::zeros(1, 16, 16);
        let mask = windowed_otsu(&img, 7, 256).unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn zeroed_pixels_never_positive() {
        let img = random_raster(7, 1, 32, 32);
        let masked = global_threshold(&img, 0.6);
        let mask = windowed_otsu(&masked, 15, 256).unwrap();
        for i in 0..masked.data().len() {
            if masked.data()[i] == 0.0 {
                assert!(!mask.data[i]);
            }
        }
    }

    /// Plain quadratic DBSCAN with the same core/border rules.
    fn dbscan_oracle(mask: &Mask, e_max: f64, n_min: usize) -> (Vec<i32>, usize) {
        let (h, w) = (mask.h, mask.w);
        let points: Vec<(usize, usize)> = (0..h * w)
            .filter(|&i| mask.data[i])
            .map(|i| (i / w, i % w))
            .collect();
        let n = points.len();
        let eps2 = e_max * e_max;
        let neighbors = |i: usize| -> Vec<usize> {
            (0..n)
                .filter(|&j| {
                    let dr = points[i].0 as f64 - points[j].0 as f64;
                    let dc = points[i].1 as f64 - points[j].1 as f64;
                    dr * dr + dc * dc <= eps2
                })
                .collect()
        };
        let mut labels = vec![-1i32; n];
        let mut visited = vec![false; n];
        let mut cluster = 0i32;
        for i in 0..n {
            if visited[i] {
                continue;
            }
            visited[i] = true;
            let ns = neighbors(i);
            if ns.len() < n_min {
                continue;
            }
            labels[i] = cluster;
            let mut queue: std::collections::VecDeque<usize> = ns.into();
            while let Some(j) = queue.pop_front() {
                if labels[j] == -1 {
                    labels[j] = cluster;
                }
                if visited[j] {
                    continue;
                }
                visited[j] = true;
                let nj = neighbors(j);
                if nj.len() >= n_min {
                    queue.extend(nj);
                }
            }
            cluster += 1;
        }
        let mut img = vec![-1i32; h * w];
        for (idx, &(r, c)) in points.iter().enumerate() {
            img[r * w + c] = labels[idx];
        }
        (img, cluster as usize)
    }

    #[test]
    fn dbscan_matches_bruteforce_up_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mut mask = Mask::new(40, 40);
            for b in mask.data.iter_mut() {
                *b = rng.gen_bool(0.15);
            }
            let (fast, nfast) = dbscan_labels(&mask, 2.5, 4);
            let (slow, nslow) = dbscan_oracle(&mask, 2.5, 4);
            assert_eq!(nfast, nslow);
            // labels must match under a bijection
            let mut map = std::collections::HashMap::new();
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(*a == -1, *b == -1);
                if *a != -1 {
                    let e = map.entry(*a).or_insert(*b);
                    assert_eq!(*e, *b, "inconsistent relabeling");
                }
            }
        }
    }

    #[test]
    fn dense_block_survives_isolated_pixel_dropped() {
        let mut mask = Mask::new(32, 32);
        for y in 4..14 {
            for x in 4..14 {
                mask.data[y * 32 + x] = true;
            }
        }
        mask.data[25 * 32 + 25] = true; // lone pixel
        let (cleaned, labels, clusters) = dbscan_filter(&mask, 5.0, 48);
        assert_eq!(clusters, 1);
        assert_eq!(cleaned.count(), 100);
        assert!(!cleaned.data[25 * 32 + 25]);
        assert_eq!(labels[25 * 32 + 25], -1);

        // single positive with n_min=2 is noise
        let mut single = Mask::new(8, 8);
        single.data[3 * 8 + 3] = true;
        let (cleaned, _, clusters) = dbscan_filter(&single, 5.0, 2);
        assert_eq!((cleaned.count(), clusters), (0, 0));

        // empty map
        let empty = Mask::new(8, 8);
        let (cleaned, _, clusters) = dbscan_filter(&empty, 5.0, 2);
        assert_eq!((cleaned.count(), clusters), (0, 0));
    }

    #[test]
    fn dr_far_arithmetic() {
        let mut truth = Mask::new(10, 100);
        for i in 0..100 {
            truth.data[i] = true; // 100 changed, 900 unchanged
        }
        let mut pred = Mask::new(10, 100);
        for i in 0..75 {
            pred.data[i] = true; // 75 TP
        }
        for i in 100..109 {
            pred.data[i] = true; // 9 FP
        }
        let m = evaluate_dr_far(&pred, &truth).unwrap();
        assert!((m.dr - 0.75).abs() < 1e-12);
        assert!((m.far - 0.01).abs() < 1e-12);
        assert!(m.dr_defined);

        let perfect = evaluate_dr_far(&truth, &truth).unwrap();
        assert_eq!((perfect.dr, perfect.far), (1.0, 0.0));

        let empty_truth = Mask::new(10, 100);
        let m = evaluate_dr_far(&pred, &empty_truth).unwrap();
        assert!(!m.dr_defined && m.dr.is_nan());
    }

    #[test]
    fn identical_runs_identical_maps() {
        let pre = random_raster(31, 2, 48, 48);
        let post = random_raster(32, 2, 48, 48);
        let cfg = ChangeDetConfig {
            w_otsu: 31,
            ..Default::default()
        };
        let a = detect_changes(&pre, &post, &cfg).unwrap();
        let b = detect_changes(&pre, &post, &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.diff.data(), b.diff.data());
    }

    #[test]
    fn pre_equals_post_gives_empty_map() {
        let img = random_raster(33, 3, 48, 48);
        let cfg = ChangeDetConfig {
            w_otsu: 31,
            ..Default::default()
        };
        let map = detect_changes(&img, &img, &cfg).unwrap();
        assert_eq!(map.mask.count(), 0);
        assert_eq!(map.cluster_count, 0);
    }

    #[test]
    fn changemap_invariants_hold() {
        let pre = random_raster(41, 1, 48, 48);
        let mut post = pre.clone();
        for y in 10..30 {
            for x in 10..30 {
                post.set(0, y, x, post.get(0, y, x) + 0.6);
            }
        }
        let cfg = ChangeDetConfig {
            omega: 0.1,
            w_otsu: 31,
            ..Default::default()
        };
        let map = detect_changes(&pre, &post, &cfg).unwrap();
        for i in 0..map.mask.data.len() {
            if map.mask.data[i] {
                assert!(map.labels[i] != -1);
                assert!(f64::from(map.diff.data()[i]) >= cfg.omega);
            }
        }
    }
}
