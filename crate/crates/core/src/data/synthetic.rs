//! Deterministic synthetic scenes: three visually distinct plant-like shape
//! classes over a soil-textured background, with tight bounding boxes and an
//! optional domain shift (hue rotation + blur) for adaptation experiments.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scalar::Scalar;

/// Scene generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub canvas: usize,
    /// Objects per image drawn uniformly from this range (inclusive).
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object size as a fraction of the canvas side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// Placement rejection cap: new boxes may overlap existing ones at most
    /// this IoU.
    pub max_overlap: f64,
    /// Domain-shift hue rotation in degrees (0 disables).
    pub hue_shift_deg: f64,
    /// Domain-shift Gaussian blur sigma (0 disables).
    pub blur_sigma: f64,
    /// Maximum count of non-class background distractors per image.
    pub max_distractors: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            min_objects: 1,
            max_objects: 6,
            min_size_frac: 0.05,
            max_size_frac: 0.4,
            max_overlap: 0.3,
            hue_shift_deg: 0.0,
            blur_sigma: 0.0,
            max_distractors: 3,
        }
    }
}

/// Standard HSV -> RGB conversion (h in degrees).
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub const CLASS_NAMES: [&str; 3] = ["broadleaf_blob", "grass_streak", "crop_rosette"];
pub const NUM_CLASSES: usize = 3;

/// Files written by [`gen_synthetic_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_images: usize,
    pub canvas: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub files: Vec<String>,
    pub spec: SyntheticSceneSpec,
}

fn background(rng: &mut ChaCha8Rng, s: usize) -> Array3<f64> {
    // soil family varies per image: brown through gray, with lightness
    // gradient and pixel noise
    let hue = rng.gen_range(15.0..45.0);
    let sat = rng.gen_range(0.08..0.45);
    let val = rng.gen_range(0.22..0.55);
    let base = hsv_to_rgb(hue, sat, val);
    let gx = rng.gen_range(-0.12..0.12);
    let gy = rng.gen_range(-0.12..0.12);
    let mut img = Array3::<f64>::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let grad = gx * (x as f64 / s as f64 - 0.5) + gy * (y as f64 / s as f64 - 0.5);
            let noise = rng.gen_range(-0.04..0.04);
            for c in 0..3 {
                img[[c, y, x]] = (base[c] + grad + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Implicit mask of one object class inside a local box frame.
/// Coordinates `u, v` are in `[-1, 1]` across the target box.
fn inside_shape(class: usize, u: f64, v: f64, wob: f64) -> bool {
    match class {
        // broadleaf blob: ellipse with a wavy lobed boundary
        0 => {
            let r = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let edge = 0.82 + 0.18 * (3.0 * theta + wob).sin();
            r <= edge
        }
        // grass streak: thin rotated bar
        1 => {
            let (sinr, cosr) = wob.sin_cos();
            let a = u * cosr + v * sinr;
            let b = -u * sinr + v * cosr;
            a.abs() <= 0.95 && b.abs() <= 0.22
        }
        // crop rosette: central disc plus radial petals
        _ => {
            let r = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let petals = 0.55 + 0.42 * (5.0 * theta + wob).cos().abs();
            r <= 0.3 || (r <= petals && r >= 0.15)
        }
    }
}

fn class_color(class: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    // every class draws from the same green family: classes are separable
    // by shape, not color
    let _ = class;
    let (hue, sat, val) = (
        rng.gen_range(70.0..140.0),
        rng.gen_range(0.50..0.95),
        rng.gen_range(0.30..0.80),
    );
    hsv_to_rgb(hue, sat, val)
}

/// Approximate hue rotation around the gray axis.
fn hue_rotate(rgb: [f64; 3], deg: f64) -> [f64; 3] {
    let a = deg.to_radians();
    let (s, c) = a.sin_cos();
    let m = [
        [
            0.213 + c * 0.787 - s * 0.213,
            0.715 - c * 0.715 - s * 0.715,
            0.072 - c * 0.072 + s * 0.928,
        ],
        [
            0.213 - c * 0.213 + s * 0.143,
            0.715 + c * 0.285 + s * 0.140,
            0.072 - c * 0.072 - s * 0.283,
        ],
        [
            0.213 - c * 0.213 - s * 0.787,
            0.715 - c * 0.715 + s * 0.715,
            0.072 + c * 0.928 + s * 0.072,
        ],
    ];
    std::array::from_fn(|i| {
        (m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2]).clamp(0.0, 1.0)
    })
}

fn gaussian_blur(img: &mut Array3<f64>, sigma: f64) {
    let radius = 2isize;
    let mut kernel = [0.0f64; 5];
    let mut norm = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - radius as f64;
        *k = (-d * d / (2.0 * sigma * sigma)).exp();
        norm += *k;
    }
    for k in &mut kernel {
        *k /= norm;
    }
    let (cs, h, w) = img.dim();
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = img.clone();
    for c in 0..cs {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kw) in kernel.iter().enumerate() {
                    acc += img[[c, y, clampi(x as isize + ki as isize - radius, w)]] * kw;
                }
                tmp[[c, y, x]] = acc;
            }
        }
    }
    for c in 0..cs {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kw) in kernel.iter().enumerate() {
                    acc += tmp[[c, clampi(y as isize + ki as isize - radius, h), x]] * kw;
                }
                img[[c, y, x]] = acc;
            }
        }
    }
}

/// Renders one scene; the same `(spec, seed)` always produces the same
/// pixels and boxes. Ground-truth boxes are the tight bounds of the
/// rendered masks.
pub fn render_scene<T: Scalar>(spec: &SyntheticSceneSpec, seed: u64, image_id: u64) -> Sample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ image_id.wrapping_mul(0x9E3779B97F4A7C15));
    let s = spec.canvas;
    let mut img = background(&mut rng, s);
    let illumination = rng.gen_range(0.75..1.25);

    // non-class distractors: dull stones and dry patches, drawn first so
    // real objects overdraw them
    let n_distractors = if spec.max_distractors == 0 {
        0
    } else {
        rng.gen_range(0..=spec.max_distractors)
    };
    for _ in 0..n_distractors {
        let w = rng.gen_range(0.05..0.22) * s as f64;
        let h = rng.gen_range(0.05..0.22) * s as f64;
        let cx = rng.gen_range(w / 2.0..s as f64 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..s as f64 - h / 2.0);
        let color = hsv_to_rgb(
            rng.gen_range(10.0..50.0),
            rng.gen_range(0.02..0.25),
            rng.gen_range(0.25..0.75),
        );
        let wob = rng.gen_range(0.0..std::f64::consts::TAU);
        let (px0, py0) = (((cx - w / 2.0).floor().max(0.0)) as usize, ((cy - h / 2.0).floor().max(0.0)) as usize);
        let (px1, py1) = (((cx + w / 2.0).ceil() as usize).min(s), ((cy + h / 2.0).ceil() as usize).min(s));
        for y in py0..py1 {
            for x in px0..px1 {
                let u = (x as f64 + 0.5 - cx) / (w / 2.0);
                let v = (y as f64 + 0.5 - cy) / (h / 2.0);
                let r = (u * u + v * v).sqrt();
                let edge = 0.85 + 0.15 * (2.0 * v.atan2(u) + wob).sin();
                if r <= edge {
                    let shade = 1.0 + 0.10 * (u * 1.3 + v * 1.9).sin();
                    for c in 0..3 {
                        img[[c, y, x]] = (color[c] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let n_objects = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox<f64>> = Vec::new();

    for _ in 0..n_objects {
        let mut placed = None;
        for _try in 0..20 {
            let w = rng.gen_range(spec.min_size_frac..spec.max_size_frac) * s as f64;
            let h = rng.gen_range(spec.min_size_frac..spec.max_size_frac) * s as f64;
            let cx = rng.gen_range(w / 2.0..s as f64 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..s as f64 - h / 2.0);
            let class = rng.gen_range(0..NUM_CLASSES);
            let cand = BBox::new(cx, cy, w, h, class, 1.0).unwrap();
            if boxes.iter().all(|b| iou(b, &cand) <= spec.max_overlap) {
                placed = Some(cand);
                break;
            }
        }
        let Some(target) = placed else { continue };
        let wob = rng.gen_range(0.0..std::f64::consts::TAU);
        let color = class_color(target.class_id, &mut rng);
        let [x0, y0, x1, y1] = target.corners();
        let (px0, py0) = (x0.floor().max(0.0) as usize, y0.floor().max(0.0) as usize);
        let (px1, py1) = ((x1.ceil() as usize).min(s), (y1.ceil() as usize).min(s));
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in py0..py1 {
            for x in px0..px1 {
                let u = (x as f64 + 0.5 - target.cx) / (target.w / 2.0);
                let v = (y as f64 + 0.5 - target.cy) / (target.h / 2.0);
                if inside_shape(target.class_id, u, v, wob) {
                    let shade = 1.0 + 0.12 * (u * 1.7 + v * 2.3).sin();
                    for c in 0..3 {
                        img[[c, y, x]] = (color[c] * shade).clamp(0.0, 1.0);
                    }
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx1 <= bx0 || by1 <= by0 || (bx1 - bx0) * (by1 - by0) < 4 {
            continue; // nothing visible rendered
        }
        boxes.push(
            BBox::new(
                (bx0 + bx1) as f64 / 2.0,
                (by0 + by1) as f64 / 2.0,
                (bx1 - bx0) as f64,
                (by1 - by0) as f64,
                target.class_id,
                1.0,
            )
            .unwrap(),
        );
    }

    // per-image global illumination
    img.mapv_inplace(|v| (v * illumination).clamp(0.0, 1.0));

    if spec.hue_shift_deg != 0.0 {
        let (_, h, w) = img.dim();
        for y in 0..h {
            for x in 0..w {
                let rgb = hue_rotate([img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]], spec.hue_shift_deg);
                for c in 0..3 {
                    img[[c, y, x]] = rgb[c];
                }
            }
        }
    }
    if spec.blur_sigma > 0.0 {
        gaussian_blur(&mut img, spec.blur_sigma);
    }

    Sample {
        image_id,
        image: img.mapv(T::of),
        boxes: boxes
            .into_iter()
            .map(|b| BBox {
                cx: T::of(b.cx),
                cy: T::of(b.cy),
                w: T::of(b.w),
                h: T::of(b.h),
                class_id: b.class_id,
                score: T::one(),
            })
            .collect(),
    }
}

/// Renders `n_images` scenes into `out_dir` (`images/`, `annotations.json`,
/// `manifest.json`), deterministically from the seed.
pub fn gen_synthetic_dataset<T: Scalar>(
    spec: &SyntheticSceneSpec,
    n_images: usize,
    seed: u64,
    out_dir: &std::path::Path,
) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(Error::config("n_images must be >= 1"));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut samples = Vec::with_capacity(n_images);
    let mut files = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let sample = render_scene::<T>(spec, seed, i as u64);
        let file = format!("{i:06}.png");
        super::save_png(&sample.image, &out_dir.join("images").join(&file))?;
        files.push(file);
        samples.push(sample);
    }
    let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    super::coco::save_coco(&samples, &files, spec.canvas, &names, &out_dir.join("annotations.json"))?;
    let manifest = DatasetManifest {
        n_images,
        canvas: spec.canvas,
        num_classes: NUM_CLASSES,
        class_names: names,
        seed,
        files,
        spec: spec.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}
