//! Weak and strong augmentation pipelines with exact box remapping: mosaic
//! composition, horizontal flip, random scaling, color jitter, grayscale,
//! Gaussian blur, cutout, channel permutation, and the mixed-pseudo-label
//! transforms (pseudo mixup / pseudo mosaic).
//!
//! Every pipeline records the applied transforms with their drawn
//! parameters; replaying a record over the same sources reproduces the
//! output bit-exactly.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::multiscale::interpolate_image;
use crate::scalar::Scalar;

/// Minimum surviving box area after clipping, in square pixels.
pub const MIN_BOX_AREA: f64 = 4.0;

/// An image with its boxes, before augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image_id: u64,
    pub image: Array3<T>,
    pub boxes: Vec<BBox<T>>,
}

/// An augmented image, its remapped boxes, and the replayable record.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample<T> {
    pub image_id: u64,
    pub image: Array3<T>,
    pub boxes: Vec<BBox<T>>,
    pub record: AugRecord<T>,
}

/// One applied transform with its drawn parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transform<T> {
    /// 2x2 mosaic of four sources around `center` on a `canvas`-sized square.
    Mosaic { center: (usize, usize), canvas: usize },
    /// Exact integer downscale by `factor` (bilinear).
    Downscale { factor: usize },
    /// Fixed-size spatial crop at the given origin.
    Crop { y0: usize, x0: usize, side: usize },
    HFlip,
    /// Resize content to `new_side` and paste centered on the same canvas.
    Scale { new_side: usize },
    ColorJitter { gain: [T; 3], bias: [T; 3] },
    Grayscale,
    Blur { sigma: T },
    Cutout { y0: usize, x0: usize, h: usize, w: usize },
    ChannelSwap { order: [usize; 3] },
    /// Pixel blend of two sources; boxes are concatenated.
    Mixup { ratio: T },
}

pub type AugRecord<T> = Vec<Transform<T>>;

/// Per-transform probabilities and parameter ranges of the strong pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_prob: f64,
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub cutout_prob: f64,
    pub colorspace_prob: f64,
    pub mixup_ratio: f64,
    pub mixpl_mixup_prob: f64,
    pub mixpl_mosaic_prob: f64,
}

impl Default for AugParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_prob: 0.5,
            scale_min: 0.5,
            scale_max: 1.5,
            jitter_prob: 0.8,
            gray_prob: 0.1,
            blur_prob: 0.2,
            cutout_prob: 0.3,
            colorspace_prob: 0.1,
            mixup_ratio: 0.5,
            mixpl_mixup_prob: 0.5,
            mixpl_mosaic_prob: 0.5,
        }
    }
}

fn side<T: Scalar>(image: &Array3<T>) -> usize {
    image.dim().1
}

fn clip_to_rect<T: Scalar>(
    b: &BBox<T>,
    y0: f64,
    x0: f64,
    y1: f64,
    x1: f64,
) -> Option<BBox<T>> {
    let [bx0, by0, bx1, by1] = b.corners();
    let cx0 = bx0.as_f64().max(x0);
    let cy0 = by0.as_f64().max(y0);
    let cx1 = bx1.as_f64().min(x1);
    let cy1 = by1.as_f64().min(y1);
    if cx1 - cx0 <= 0.0 || cy1 - cy0 <= 0.0 || (cx1 - cx0) * (cy1 - cy0) < MIN_BOX_AREA {
        return None;
    }
    Some(
        BBox::from_corners(
            T::of(cx0),
            T::of(cy0),
            T::of(cx1),
            T::of(cy1),
            b.class_id,
            b.score,
        )
        .expect("positive area after clip"),
    )
}

// ---------------------------------------------------------------------------
// Transform application (shared by the pipelines and replay)
// ---------------------------------------------------------------------------

fn apply_mosaic<T: Scalar>(
    sources: &[Sample<T>],
    center: (usize, usize),
    canvas: usize,
) -> Result<(Array3<T>, Vec<BBox<T>>)> {
    if sources.len() != 4 {
        return Err(Error::config(format!("mosaic needs exactly 4 samples, got {}", sources.len())));
    }
    let fill = T::of(0.5);
    let mut out = Array3::<T>::from_elem((3, canvas, canvas), fill);
    let mut boxes = Vec::new();
    let (cx, cy) = (center.0 as isize, center.1 as isize);
    for (k, s) in sources.iter().enumerate() {
        let (h, w) = (side(&s.image) as isize, s.image.dim().2 as isize);
        // destination rectangle on the canvas (corner anchored at center)
        let (dy0, dy1, dx0, dx1) = match k {
            0 => ((cy - h).max(0), cy, (cx - w).max(0), cx),
            1 => ((cy - h).max(0), cy, cx, (cx + w).min(canvas as isize)),
            2 => (cy, (cy + h).min(canvas as isize), (cx - w).max(0), cx),
            _ => (cy, (cy + h).min(canvas as isize), cx, (cx + w).min(canvas as isize)),
        };
        if dy1 <= dy0 || dx1 <= dx0 {
            continue;
        }
        let (rh, rw) = ((dy1 - dy0) as usize, (dx1 - dx0) as usize);
        // matching source crop: anchored at the source corner that touches
        // the mosaic center
        let (sy0, sx0) = match k {
            0 => (h as usize - rh, w as usize - rw),
            1 => (h as usize - rh, 0),
            2 => (0, w as usize - rw),
            _ => (0, 0),
        };
        out.slice_mut(ndarray::s![
            ..,
            dy0 as usize..dy1 as usize,
            dx0 as usize..dx1 as usize
        ])
        .assign(&s.image.slice(ndarray::s![.., sy0..sy0 + rh, sx0..sx0 + rw]));
        let (dy, dx) = (dy0 as f64 - sy0 as f64, dx0 as f64 - sx0 as f64);
        for b in &s.boxes {
            let shifted = b.shifted(T::of(dx), T::of(dy));
            if let Some(clipped) = clip_to_rect(
                &shifted,
                dy0 as f64,
                dx0 as f64,
                dy1 as f64,
                dx1 as f64,
            ) {
                boxes.push(clipped);
            }
        }
    }
    Ok((out, boxes))
}

fn apply_crop<T: Scalar>(
    image: &Array3<T>,
    boxes: &[BBox<T>],
    y0: usize,
    x0: usize,
    side: usize,
) -> Result<(Array3<T>, Vec<BBox<T>>)> {
    let (_, h, w) = image.dim();
    if y0 + side > h || x0 + side > w {
        return Err(Error::shape(format!(
            "crop ({y0},{x0})+{side} exceeds {h}x{w}"
        )));
    }
    let out = image
        .slice(ndarray::s![.., y0..y0 + side, x0..x0 + side])
        .to_owned();
    let mut mapped = Vec::new();
    for b in boxes {
        let shifted = b.shifted(-T::of_usize(x0), -T::of_usize(y0));
        if let Some(c) = clip_to_rect(&shifted, 0.0, 0.0, side as f64, side as f64) {
            mapped.push(c);
        }
    }
    Ok((out, mapped))
}

fn apply_downscale<T: Scalar>(
    image: &Array3<T>,
    boxes: &[BBox<T>],
    factor: usize,
) -> Result<(Array3<T>, Vec<BBox<T>>)> {
    let s = side(image);
    if factor == 0 || s % factor != 0 {
        return Err(Error::shape(format!("downscale factor {factor} does not divide {s}")));
    }
    let scaled = interpolate_image(image, s / factor)?;
    let inv = T::one() / T::of_usize(factor);
    Ok((scaled, boxes.iter().map(|b| b.scaled(inv)).collect()))
}

fn apply_hflip<T: Scalar>(image: &Array3<T>, boxes: &[BBox<T>]) -> (Array3<T>, Vec<BBox<T>>) {
    let (c, h, w) = image.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = image[[ci, y, w - 1 - x]];
            }
        }
    }
    let width = T::of_usize(w);
    let flipped = boxes
        .iter()
        .map(|b| BBox { cx: width - b.cx, ..*b })
        .collect();
    (out, flipped)
}

fn apply_scale<T: Scalar>(
    image: &Array3<T>,
    boxes: &[BBox<T>],
    new_side: usize,
) -> Result<(Array3<T>, Vec<BBox<T>>)> {
    let s = side(image);
    let resized = interpolate_image(image, new_side)?;
    let fill = T::of(0.5);
    let mut out = Array3::<T>::from_elem((3, s, s), fill);
    let ratio = new_side as f64 / s as f64;
    let mut mapped = Vec::new();
    if new_side <= s {
        let off = (s - new_side) / 2;
        out.slice_mut(ndarray::s![.., off..off + new_side, off..off + new_side])
            .assign(&resized);
        for b in boxes {
            let nb = b.scaled(T::of(ratio)).shifted(T::of_usize(off), T::of_usize(off));
            if let Some(c) = clip_to_rect(
                &nb,
                off as f64,
                off as f64,
                (off + new_side) as f64,
                (off + new_side) as f64,
            ) {
                mapped.push(c);
            }
        }
    } else {
        let off = (new_side - s) / 2;
        out.assign(&resized.slice(ndarray::s![.., off..off + s, off..off + s]));
        for b in boxes {
            let nb = b.scaled(T::of(ratio)).shifted(-T::of_usize(off), -T::of_usize(off));
            if let Some(c) = clip_to_rect(&nb, 0.0, 0.0, s as f64, s as f64) {
                mapped.push(c);
            }
        }
    }
    Ok((out, mapped))
}

fn apply_jitter<T: Scalar>(image: &Array3<T>, gain: [T; 3], bias: [T; 3]) -> Array3<T> {
    let mut out = image.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v * gain[c] + bias[c]).max(T::zero()).min(T::one()));
    }
    out
}

fn apply_grayscale<T: Scalar>(image: &Array3<T>) -> Array3<T> {
    let (_, h, w) = image.dim();
    let mut out = Array3::<T>::zeros((3, h, w));
    let (wr, wg, wb) = (T::of(0.299), T::of(0.587), T::of(0.114));
    for y in 0..h {
        for x in 0..w {
            let l = image[[0, y, x]] * wr + image[[1, y, x]] * wg + image[[2, y, x]] * wb;
            for c in 0..3 {
                out[[c, y, x]] = l;
            }
        }
    }
    out
}

fn apply_blur<T: Scalar>(image: &Array3<T>, sigma: T) -> Array3<T> {
    let radius = 2isize;
    let s2 = sigma * sigma * T::of(2.0);
    let mut kernel = Vec::with_capacity(5);
    let mut norm = T::zero();
    for i in -radius..=radius {
        let d = T::of(i as f64);
        let w = (-(d * d) / s2).exp();
        kernel.push(w);
        norm = norm + w;
    }
    for k in &mut kernel {
        *k = *k / norm;
    }
    let (c, h, w) = image.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (ki, kw) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius, w);
                    acc = acc + image[[ci, y, sx]] * *kw;
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (ki, kw) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius, h);
                    acc = acc + tmp[[ci, sy, x]] * *kw;
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

fn apply_cutout<T: Scalar>(image: &Array3<T>, y0: usize, x0: usize, h: usize, w: usize) -> Array3<T> {
    let mut out = image.clone();
    let (c, ih, iw) = out.dim();
    let y1 = (y0 + h).min(ih);
    let x1 = (x0 + w).min(iw);
    for ci in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                out[[ci, y, x]] = T::of(0.5);
            }
        }
    }
    out
}

fn apply_channel_swap<T: Scalar>(image: &Array3<T>, order: [usize; 3]) -> Array3<T> {
    let (_, h, w) = image.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| image[[order[c], y, x]])
}

/// Replays a transform record over the original sources; weak/mosaic records
/// take 4 sources, mixup takes 2, everything else takes 1.
pub fn replay<T: Scalar>(sources: &[Sample<T>], record: &AugRecord<T>) -> Result<AugmentedSample<T>> {
    let mut image;
    let mut boxes;
    let mut idx = 0usize;
    match record.first() {
        Some(Transform::Mosaic { center, canvas }) => {
            let (img, bx) = apply_mosaic(sources, *center, *canvas)?;
            image = img;
            boxes = bx;
            idx = 1;
        }
        Some(Transform::Mixup { ratio }) => {
            if sources.len() != 2 {
                return Err(Error::config("mixup replay needs 2 sources"));
            }
            let r = *ratio;
            image = &sources[0].image * r + &sources[1].image * (T::one() - r);
            boxes = sources[0].boxes.clone();
            boxes.extend_from_slice(&sources[1].boxes);
            idx = 1;
        }
        _ => {
            image = sources[0].image.clone();
            boxes = sources[0].boxes.clone();
        }
    }
    for t in &record[idx..] {
        match t {
            Transform::Mosaic { .. } | Transform::Mixup { .. } => {
                return Err(Error::config("mosaic/mixup must be the first record entry"))
            }
            Transform::Downscale { factor } => {
                let (i, b) = apply_downscale(&image, &boxes, *factor)?;
                image = i;
                boxes = b;
            }
            Transform::Crop { y0, x0, side } => {
                let (i, b) = apply_crop(&image, &boxes, *y0, *x0, *side)?;
                image = i;
                boxes = b;
            }
            Transform::HFlip => {
                let (i, b) = apply_hflip(&image, &boxes);
                image = i;
                boxes = b;
            }
            Transform::Scale { new_side } => {
                let (i, b) = apply_scale(&image, &boxes, *new_side)?;
                image = i;
                boxes = b;
            }
            Transform::ColorJitter { gain, bias } => image = apply_jitter(&image, *gain, *bias),
            Transform::Grayscale => image = apply_grayscale(&image),
            Transform::Blur { sigma } => image = apply_blur(&image, *sigma),
            Transform::Cutout { y0, x0, h, w } => image = apply_cutout(&image, *y0, *x0, *h, *w),
            Transform::ChannelSwap { order } => image = apply_channel_swap(&image, *order),
        }
    }
    Ok(AugmentedSample { image_id: sources[0].image_id, image, boxes, record: record.clone() })
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

/// Mosaic composition: 2x2 placement of four sources around a center drawn
/// uniformly from the middle half of the canvas. Boxes are clipped to their
/// pasted region; remnants under [`MIN_BOX_AREA`] are dropped.
pub fn mosaic_compose<T: Scalar>(
    samples: &[Sample<T>],
    canvas: usize,
    seed: u64,
) -> Result<AugmentedSample<T>> {
    if samples.len() != 4 {
        return Err(Error::config(format!("mosaic needs exactly 4 samples, got {}", samples.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = canvas / 4;
    let hi = 3 * canvas / 4;
    let center = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let record = vec![Transform::Mosaic { center, canvas }];
    let (image, boxes) = apply_mosaic(samples, center, canvas)?;
    Ok(AugmentedSample { image_id: samples[0].image_id, image, boxes, record })
}

/// Weak augmentation: mosaic of four sources at twice the model size,
/// cropped back to the model size around the mosaic center (object scale is
/// preserved), plus a probability-1/2 horizontal flip.
pub fn weak_augment<T: Scalar>(
    samples: &[Sample<T>],
    model_size: usize,
    seed: u64,
) -> Result<AugmentedSample<T>> {
    let mut out = mosaic_compose(samples, 2 * model_size, seed)?;
    let (cy, cx) = match out.record[0] {
        Transform::Mosaic { center, .. } => center,
        _ => unreachable!("mosaic is the first record entry"),
    };
    let y0 = cy.saturating_sub(model_size / 2).min(model_size);
    let x0 = cx.saturating_sub(model_size / 2).min(model_size);
    let (img, bx) = apply_crop(&out.image, &out.boxes, y0, x0, model_size)?;
    out.image = img;
    out.boxes = bx;
    out.record.push(Transform::Crop { y0, x0, side: model_size });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F11F);
    if rng.gen_bool(0.5) {
        let (img, bx) = apply_hflip(&out.image, &out.boxes);
        out.image = img;
        out.boxes = bx;
        out.record.push(Transform::HFlip);
    }
    Ok(out)
}

/// Strong augmentation: flip, scale, color jitter, grayscale, blur, cutout,
/// and channel permutation, each drawn independently. Geometric transforms
/// remap boxes; photometric ones leave them untouched.
pub fn strong_augment<T: Scalar>(
    sample: &AugmentedSample<T>,
    params: &AugParams,
    seed: u64,
) -> Result<AugmentedSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side(&sample.image);
    let mut image = sample.image.clone();
    let mut boxes = sample.boxes.clone();
    let mut record = Vec::new();

    if rng.gen_bool(params.flip_prob) {
        let (i, b) = apply_hflip(&image, &boxes);
        image = i;
        boxes = b;
        record.push(Transform::HFlip);
    }
    if rng.gen_bool(params.scale_prob) {
        let f = rng.gen_range(params.scale_min..params.scale_max);
        let new_side = ((s as f64 * f).round() as usize).max(8);
        let (i, b) = apply_scale(&image, &boxes, new_side)?;
        image = i;
        boxes = b;
        record.push(Transform::Scale { new_side });
    }
    if rng.gen_bool(params.jitter_prob) {
        let mut gain = [T::zero(); 3];
        let mut bias = [T::zero(); 3];
        for c in 0..3 {
            gain[c] = T::of(rng.gen_range(0.7..1.3));
            bias[c] = T::of(rng.gen_range(-0.1..0.1));
        }
        image = apply_jitter(&image, gain, bias);
        record.push(Transform::ColorJitter { gain, bias });
    }
    if rng.gen_bool(params.gray_prob) {
        image = apply_grayscale(&image);
        record.push(Transform::Grayscale);
    }
    if rng.gen_bool(params.blur_prob) {
        let sigma = T::of(rng.gen_range(0.4..1.2));
        image = apply_blur(&image, sigma);
        record.push(Transform::Blur { sigma });
    }
    if rng.gen_bool(params.cutout_prob) {
        // hole capped at 20% of the image area
        let fh: f64 = rng.gen_range(0.1..0.45);
        let fw = rng.gen_range(0.1..(0.2 / fh).min(0.45));
        let h = (s as f64 * fh) as usize;
        let w = (s as f64 * fw) as usize;
        let y0 = rng.gen_range(0..s - h);
        let x0 = rng.gen_range(0..s - w);
        image = apply_cutout(&image, y0, x0, h, w);
        record.push(Transform::Cutout { y0, x0, h, w });
    }
    if rng.gen_bool(params.colorspace_prob) {
        let order = [2, 1, 0];
        image = apply_channel_swap(&image, order);
        record.push(Transform::ChannelSwap { order });
    }
    Ok(AugmentedSample { image_id: sample.image_id, image, boxes, record })
}

/// Pixel-wise blend `ratio*a + (1-ratio)*b` with concatenated box lists;
/// every box keeps its own score.
pub fn pseudo_mixup<T: Scalar>(
    a: &AugmentedSample<T>,
    b: &AugmentedSample<T>,
    ratio: T,
) -> Result<AugmentedSample<T>> {
    if a.image.dim() != b.image.dim() {
        return Err(Error::shape("mixup requires same canvas size"));
    }
    let image = &a.image * ratio + &b.image * (T::one() - ratio);
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    Ok(AugmentedSample {
        image_id: a.image_id,
        image,
        boxes,
        record: vec![Transform::Mixup { ratio }],
    })
}

/// Pseudo mosaic: mosaic composition over four pseudo-labeled samples at
/// twice the canvas, downscaled back to the canvas (so placed objects halve
/// in size); scores survive clipping unchanged.
pub fn pseudo_mosaic<T: Scalar>(
    samples: &[AugmentedSample<T>],
    canvas: usize,
    seed: u64,
) -> Result<AugmentedSample<T>> {
    let sources: Vec<Sample<T>> = samples
        .iter()
        .map(|s| Sample { image_id: s.image_id, image: s.image.clone(), boxes: s.boxes.clone() })
        .collect();
    let mut out = mosaic_compose(&sources, 2 * canvas, seed)?;
    let (img, bx) = apply_downscale(&out.image, &out.boxes, 2)?;
    out.image = img;
    out.boxes = bx;
    out.record.push(Transform::Downscale { factor: 2 });
    Ok(out)
}

/// Per-class count of boxes, for the presented-GT statistics.
pub fn count_classes<T: Scalar>(boxes: &[BBox<T>], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for b in boxes {
        if b.class_id < num_classes {
            counts[b.class_id] += 1;
        }
    }
    counts
}
