//! Procedural paired-imagery generator: value-noise backgrounds with
//! rectangles, road segments and ellipses, an LR degradation chain
//! (blur, downsample, color shift, sensor noise, upsample), and change
//! events with exact truth masks.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::changedet::gaussian_blur_sigma;
use crate::error::{Error, Result};
use crate::raster::{bicubic_resize, read_rsr, RasterImage};
use crate::training::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChangeSpec {
    /// Rectangles inserted into the post-event scene.
    pub added_rects: usize,
    /// Original objects removed from the post-event scene.
    pub removed_objects: usize,
    /// Side range of inserted rectangles.
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for ChangeSpec {
    fn default() -> Self {
        Self {
            added_rects: 0,
            removed_objects: 0,
            min_side: 24,
            max_side: 48,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub n_rect: usize,
    pub n_line: usize,
    pub n_ellipse: usize,
    pub noise_octaves: usize,
    /// Uniform per-channel offset range for the LR image (+- this value).
    pub color_shift: f32,
    /// Spatial degradation factor between the domains.
    pub blur_factor: usize,
    /// Additive Gaussian noise sigma on the LR image.
    pub sensor_noise: f32,
    pub changes: ChangeSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 128,
            n_rect: 8,
            n_line: 3,
            n_ellipse: 4,
            noise_octaves: 3,
            color_shift: 0.3,
            blur_factor: 3,
            sensor_noise: 0.01,
            changes: ChangeSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidArgument(
                "scene size must be at least 8".into(),
            ));
        }
        if self.blur_factor == 0 {
            return Err(Error::InvalidArgument(
                "blur factor must be positive".into(),
            ));
        }
        if self.changes.min_side == 0 || self.changes.max_side < self.changes.min_side {
            return Err(Error::InvalidArgument(
                "bad change rectangle side range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect {
        r0: usize,
        c0: usize,
        h: usize,
        w: usize,
    },
    Segment {
        r0: f64,
        c0: f64,
        r1: f64,
        c1: f64,
        thick: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct SceneObject {
    id: i32,
    shape: Shape,
    color: [f32; 3],
}

struct Scene {
    size: usize,
    background: RasterImage,
    objects: Vec<SceneObject>,
}

/// Multi-octave bilinear value noise in roughly [0.2, 0.6].
fn value_noise(rng: &mut ChaCha8Rng, size: usize, octaves: usize) -> RasterImage {
    let mut acc = vec![0f64; 3 * size * size];
    let mut amp_total = 0.0;
    for o in 0..octaves.max(1) {
        let cells = (4 << o).min(size);
        let g = cells + 1;
        let amp = 0.5f64.powi(o as i32);
        amp_total += amp;
        for c in 0..3 {
            let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect();
            for y in 0..size {
                let fy = y as f64 / size as f64 * cells as f64;
                let iy = fy.floor() as usize;
                let ty = fy - iy as f64;
                for x in 0..size {
                    let fx = x as f64 / size as f64 * cells as f64;
                    let ix = fx.floor() as usize;
                    let tx = fx - ix as f64;
                    let v00 = lattice[iy * g + ix];
                    let v01 = lattice[iy * g + ix + 1];
                    let v10 = lattice[(iy + 1) * g + ix];
                    let v11 = lattice[(iy + 1) * g + ix + 1];
                    let v = v00 * (1.0 - ty) * (1.0 - tx)
                        + v01 * (1.0 - ty) * tx
                        + v10 * ty * (1.0 - tx)
                        + v11 * ty * tx;
                    acc[(c * size + y) * size + x] += amp * v;
                }
            }
        }
    }
    let data = acc
        .iter()
        .map(|&v| (0.2 + 0.4 * (v / amp_total)) as f32)
        .collect();
    RasterImage::new(3, size, size, data).expect("noise finite")
}

fn build_scene(spec: &SceneSpec) -> Scene {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "scene", &[]));
    let background = value_noise(&mut rng, size, spec.noise_octaves);

    let mut objects = Vec::new();
    let mut id = 0i32;
    for _ in 0..spec.n_rect {
        let h = rng.gen_range(size / 10..=size / 4).max(2);
        let w = rng.gen_range(size / 10..=size / 4).max(2);
        let r0 = rng.gen_range(0..size.saturating_sub(h).max(1));
        let c0 = rng.gen_range(0..size.saturating_sub(w).max(1));
        let color = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        objects.push(SceneObject {
            id,
            shape: Shape::Rect { r0, c0, h, w },
            color,
        });
        id += 1;
    }
    for _ in 0..spec.n_line {
        let base: f32 = rng.gen_range(0.25..0.6);
        let color = [base, base * 0.97, base * 1.02];
        objects.push(SceneObject {
            id,
            shape: Shape::Segment {
                r0: rng.gen_range(0.0..size as f64),
                c0: rng.gen_range(0.0..size as f64),
                r1: rng.gen_range(0.0..size as f64),
                c1: rng.gen_range(0.0..size as f64),
                thick: rng.gen_range(1.0..2.5),
            },
            color,
        });
        id += 1;
    }
    for _ in 0..spec.n_ellipse {
        let g: f32 = rng.gen_range(0.35..0.7);
        let color = [g * 0.45, g, g * 0.4];
        objects.push(SceneObject {
            id,
            shape: Shape::Ellipse {
                cy: rng.gen_range(0.0..size as f64),
                cx: rng.gen_range(0.0..size as f64),
                ry: rng.gen_range(size as f64 / 16.0..size as f64 / 6.0),
                rx: rng.gen_range(size as f64 / 16.0..size as f64 / 6.0),
            },
            color,
        });
        id += 1;
    }
    Scene {
        size,
        background,
        objects,
    }
}

fn dist_to_segment(y: f64, x: f64, r0: f64, c0: f64, r1: f64, c1: f64) -> f64 {
    let (vy, vx) = (r1 - r0, c1 - c0);
    let len2 = vy * vy + vx * vx;
    let t = if len2 > 0.0 {
        (((y - r0) * vy + (x - c0) * vx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (py, px) = (r0 + t * vy, c0 + t * vx);
    ((y - py).powi(2) + (x - px).powi(2)).sqrt()
}

/// Paints objects over the background in id order; returns the image
/// and the per-pixel top-most owner id (-1 for background).
fn render(scene: &Scene, objects: &[SceneObject]) -> (RasterImage, Vec<i32>) {
    let size = scene.size;
    let mut img = scene.background.clone();
    let mut owner = vec![-1i32; size * size];
    for obj in objects {
        match obj.shape {
            Shape::Rect { r0, c0, h, w } => {
                for y in r0..(r0 + h).min(size) {
                    for x in c0..(c0 + w).min(size) {
                        owner[y * size + x] = obj.id;
                        for c in 0..3 {
                            img.set(c, y, x, obj.color[c]);
                        }
                    }
                }
            }
            Shape::Segment {
                r0,
                c0,
                r1,
                c1,
                thick,
            } => {
                let lo_y = (r0.min(r1) - thick).floor().max(0.0) as usize;
                let hi_y = (r0.max(r1) + thick).ceil().min(size as f64 - 1.0) as usize;
                let lo_x = (c0.min(c1) - thick).floor().max(0.0) as usize;
                let hi_x = (c0.max(c1) + thick).ceil().min(size as f64 - 1.0) as usize;
                for y in lo_y..=hi_y {
                    for x in lo_x..=hi_x {
                        if dist_to_segment(y as f64, x as f64, r0, c0, r1, c1) <= thick {
                            owner[y * size + x] = obj.id;
                            for c in 0..3 {
                                img.set(c, y, x, obj.color[c]);
                            }
                        }
                    }
                }
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                let lo_y = (cy - ry).floor().max(0.0) as usize;
                let hi_y = (cy + ry).ceil().min(size as f64 - 1.0) as usize;
                let lo_x = (cx - rx).floor().max(0.0) as usize;
                let hi_x = (cx + rx).ceil().min(size as f64 - 1.0) as usize;
                for y in lo_y..=hi_y {
                    for x in lo_x..=hi_x {
                        let dy = (y as f64 - cy) / ry;
                        let dx = (x as f64 - cx) / rx;
                        if dy * dy + dx * dx <= 1.0 {
                            owner[y * size + x] = obj.id;
                            for c in 0..3 {
                                img.set(c, y, x, obj.color[c]);
                            }
                        }
                    }
                }
            }
        }
    }
    (img, owner)
}

/// Degrades an HR image into its LR counterpart on the same pixel grid:
/// blur, bicubic downsample by the factor, per-channel affine color
/// shift, sensor noise, bicubic upsample back.
fn degrade(hr: &RasterImage, spec: &SceneSpec) -> Result<RasterImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "degrade", &[]));
    let f = spec.blur_factor.max(1);
    let sigma = 0.5 * f as f64;
    let window = 2 * (2.5 * sigma).ceil() as usize + 1;
    let blurred = gaussian_blur_sigma(hr, window, sigma);

    let (n_ch, h, w) = hr.shape();
    let dh = (h / f).max(2);
    let dw = (w / f).max(2);
    let mut small = bicubic_resize(&blurred, dh, dw)?;

    for c in 0..n_ch {
        let offset: f32 = rng.gen_range(-spec.color_shift..=spec.color_shift);
        let gain: f32 = 1.0 + rng.gen_range(-spec.color_shift / 3.0..=spec.color_shift / 3.0);
        for v in small.channel_mut(c) {
            *v = *v * gain + offset;
        }
    }
    if spec.sensor_noise > 0.0 {
        let noise = Normal::new(0.0f64, f64::from(spec.sensor_noise)).expect("valid sigma");
        for v in small.data_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    bicubic_resize(&small, h, w)
}

/// Renders the scene and its degraded LR counterpart.
pub fn generate_pair(spec: &SceneSpec) -> Result<(RasterImage, RasterImage)> {
    spec.validate()?;
    let scene = build_scene(spec);
    let (hr, _) = render(&scene, &scene.objects);
    let lr = degrade(&hr, spec)?;
    Ok((hr, lr))
}

/// Applies the change event to the scene: removes the configured number
/// of original objects, inserts new rectangles, re-renders, and derives
/// the truth mask as the exact set of pixels whose top-most owner
/// changed. `hr` must be the pre-event image generated from `spec`.
pub fn apply_changes(hr: &RasterImage, spec: &SceneSpec) -> Result<(RasterImage, RasterImage)> {
    spec.validate()?;
    if hr.shape() != (3, spec.size, spec.size) {
        return Err(Error::ShapeMismatch {
            expected: format!("(3, {0}, {0})", spec.size),
            got: format!("{:?}", hr.shape()),
        });
    }
    let scene = build_scene(spec);
    let (pre_img, owner_pre) = render(&scene, &scene.objects);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "changes", &[]));
    let mut post_objects = scene.objects.clone();
    for _ in 0..spec.changes.removed_objects.min(post_objects.len()) {
        let k = rng.gen_range(0..post_objects.len());
        post_objects.remove(k);
    }
    let size = spec.size;
    let mut next_id = scene.objects.len() as i32;
    for _ in 0..spec.changes.added_rects {
        let side_h = rng
            .gen_range(spec.changes.min_side..=spec.changes.max_side)
            .min(size);
        let side_w = rng
            .gen_range(spec.changes.min_side..=spec.changes.max_side)
            .min(size);
        let r0 = rng.gen_range(0..=(size - side_h));
        let c0 = rng.gen_range(0..=(size - side_w));
        // inserted structures get per-channel colors opposing the mean
        // of the content they cover, so every changed pixel carries a
        // clean contrast
        let mut color = [0f32; 3];
        for (c, color_c) in color.iter_mut().enumerate() {
            let mut mean = 0.0f64;
            for y in r0..r0 + side_h {
                for x in c0..c0 + side_w {
                    mean += f64::from(pre_img.get(c, y, x));
                }
            }
            mean /= (side_h * side_w) as f64;
            *color_c = if mean >= 0.5 {
                rng.gen_range(0.02..0.12)
            } else {
                rng.gen_range(0.88..0.98)
            };
        }
        post_objects.push(SceneObject {
            id: next_id,
            shape: Shape::Rect {
                r0,
                c0,
                h: side_h,
                w: side_w,
            },
            color,
        });
        next_id += 1;
    }

    let (hr_post, owner_post) = render(&scene, &post_objects);
    let truth: Vec<f32> = owner_pre
        .iter()
        .zip(&owner_post)
        .map(|(a, b)| if a != b { 1.0 } else { 0.0 })
        .collect();
    let truth = RasterImage::new(1, size, size, truth)?;
    Ok((hr_post, truth))
}

/// Dataset role of a generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Train => write!(f, "train"),
            Role::Val => write!(f, "val"),
            Role::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(Error::InvalidArgument(format!("unknown role {other:?}"))),
        }
    }
}

/// One manifest line: paths are stored relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub role: Role,
    pub seed: u64,
    pub hr: String,
    pub lr: String,
    pub hr_post: Option<String>,
    pub truth: Option<String>,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{} {} {} {} {}",
            e.index, e.role, e.seed, e.hr, e.lr
        ));
        if let (Some(p), Some(t)) = (&e.hr_post, &e.truth) {
            out.push_str(&format!(" {p} {t}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 && parts.len() != 7 {
            return Err(Error::InvalidArgument(format!(
                "manifest line {}: expected 5 or 7 fields, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let bad = |what: &str| {
            Error::InvalidArgument(format!("manifest line {}: bad {what}", lineno + 1))
        };
        entries.push(ManifestEntry {
            index: parts[0].parse().map_err(|_| bad("index"))?,
            role: parts[1].parse()?,
            seed: parts[2].parse().map_err(|_| bad("seed"))?,
            hr: parts[3].to_string(),
            lr: parts[4].to_string(),
            hr_post: parts.get(5).map(|s| s.to_string()),
            truth: parts.get(6).map(|s| s.to_string()),
        });
    }
    Ok(entries)
}

/// Loads the raster pair referenced by a manifest entry, resolving
/// paths against the manifest's directory.
pub fn load_entry_pair(
    manifest_path: impl AsRef<Path>,
    entry: &ManifestEntry,
) -> Result<(RasterImage, RasterImage)> {
    let dir = manifest_path
        .as_ref()
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let hr = read_rsr(dir.join(&entry.hr))?;
    let lr = read_rsr(dir.join(&entry.lr))?;
    Ok((hr, lr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::psnr;

    fn quick_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            size: 64,
            n_rect: 4,
            n_line: 2,
            n_ellipse: 2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let spec = quick_spec(9);
        let (hr1, lr1) = generate_pair(&spec).unwrap();
        let (hr2, lr2) = generate_pair(&spec).unwrap();
        assert_eq!(hr1.data(), hr2.data());
        assert_eq!(lr1.data(), lr2.data());
        assert_eq!(hr1.shape(), lr1.shape());

        let (post1, truth1) = apply_changes(&hr1, &spec).unwrap();
        let (post2, truth2) = apply_changes(&hr2, &spec).unwrap();
        assert_eq!(post1.data(), post2.data());
        assert_eq!(truth1.data(), truth2.data());
    }

    #[test]
    fn degradation_reduces_fidelity_and_high_frequency() {
        let spec = quick_spec(11);
        let (hr, lr) = generate_pair(&spec).unwrap();
        let p = psnr(&lr, &hr, 2.0).unwrap();
        assert!(p.is_finite() && p > 0.0, "psnr {p}");

        // mean absolute Laplacian as a high-frequency proxy
        let energy = |img: &RasterImage| -> f64 {
            let (n_ch, h, w) = img.shape();
            let mut acc = 0.0;
            for c in 0..n_ch {
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        let v = 4.0 * f64::from(img.get(c, y, x))
                            - f64::from(img.get(c, y - 1, x))
                            - f64::from(img.get(c, y + 1, x))
                            - f64::from(img.get(c, y, x - 1))
                            - f64::from(img.get(c, y, x + 1));
                        acc += v.abs();
                    }
                }
            }
            acc / (n_ch * (h - 2) * (w - 2)) as f64
        };
        assert!(energy(&lr) < energy(&hr), "blur must remove detail");
    }

    #[test]
    fn empty_change_spec_is_identity() {
        let spec = quick_spec(13);
        let (hr, _) = generate_pair(&spec).unwrap();
        let (post, truth) = apply_changes(&hr, &spec).unwrap();
        assert_eq!(post.data(), hr.data());
        assert!(truth.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_inserted_rect_has_exact_footprint() {
        let mut spec = quick_spec(15);
        spec.changes = ChangeSpec {
            added_rects: 1,
            removed_objects: 0,
            min_side: 40,
            max_side: 40,
        };
        spec.size = 128;
        let (hr, _) = generate_pair(&spec).unwrap();
        let (_, truth) = apply_changes(&hr, &spec).unwrap();
        let count = truth.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(count, 1600);
    }

    #[test]
    fn centroid_preserved_through_degradation() {
        // flat background plus one bright rectangle, pushed through the
        // full degradation chain: no geometric distortion expected
        let mut hr = RasterImage::filled(3, 96, 96, 0.2);
        for c in 0..3 {
            for y in 30..50 {
                for x in 52..70 {
                    hr.set(c, y, x, 0.9);
                }
            }
        }
        let spec = SceneSpec {
            seed: 77,
            size: 96,
            color_shift: 0.1,
            blur_factor: 3,
            sensor_noise: 0.01,
            ..Default::default()
        };
        let lr = degrade(&hr, &spec).unwrap();
        let centroid = |img: &RasterImage| -> (f64, f64) {
            let (_, h, w) = img.shape();
            let mean: f64 =
                img.channel(0).iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64;
            let mut wy = 0.0;
            let mut wx = 0.0;
            let mut total = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = (f64::from(img.get(0, y, x)) - mean).max(0.0).powi(2);
                    wy += v * y as f64;
                    wx += v * x as f64;
                    total += v;
                }
            }
            (wy / total, wx / total)
        };
        let (hy, hx) = centroid(&hr);
        let (ly, lx) = centroid(&lr);
        assert!(
            (hy - ly).abs() < 1.0 && (hx - lx).abs() < 1.0,
            "hr ({hy},{hx}) vs lr ({ly},{lx})"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let entries = vec![
            ManifestEntry {
                index: 0,
                role: Role::Train,
                seed: 7,
                hr: "s0_hr.rsr".into(),
                lr: "s0_lr.rsr".into(),
                hr_post: None,
                truth: None,
            },
            ManifestEntry {
                index: 1,
                role: Role::Test,
                seed: 8,
                hr: "s1_hr.rsr".into(),
                lr: "s1_lr.rsr".into(),
                hr_post: Some("s1_post.rsr".into()),
                truth: Some("s1_truth.rsr".into()),
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
    }
}
