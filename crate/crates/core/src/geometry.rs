//! Axis-aligned boxes, IoU/CIoU, non-maximum suppression, and the
//! anchor-grid encoding used by the dense heads.
//!
//! Boxes are stored in center format (cx, cy, w, h) in pixels; corner format
//! exists only at conversion boundaries.

use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::{cmp_score_desc, Scalar};

/// A detection or ground-truth box in center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    pub class_id: usize,
    pub score: T,
}

impl<T: Scalar> BBox<T> {
    /// Validates `w > 0`, `h > 0`, `score in [0,1]`.
    pub fn new(cx: T, cy: T, w: T, h: T, class_id: usize, score: T) -> Result<Self> {
        if !(w > T::zero() && h > T::zero()) {
            return Err(Error::config(format!(
                "box dimensions must be positive, got w={w} h={h}"
            )));
        }
        if !(score >= T::zero() && score <= T::one()) {
            return Err(Error::config(format!("score must be in [0,1], got {score}")));
        }
        Ok(Self { cx, cy, w, h, class_id, score })
    }

    /// Corner representation (x0, y0, x1, y1).
    #[inline]
    pub fn corners(&self) -> [T; 4] {
        let half = T::of(0.5);
        [
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        ]
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T, class_id: usize, score: T) -> Result<Self> {
        let half = T::of(0.5);
        Self::new((x0 + x1) * half, (y0 + y1) * half, x1 - x0, y1 - y0, class_id, score)
    }

    #[inline]
    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Clips the box to `[0, width] x [0, height]`; returns None when nothing
    /// with positive area remains.
    pub fn clipped(&self, width: T, height: T) -> Option<Self> {
        let [x0, y0, x1, y1] = self.corners();
        let x0 = x0.max(T::zero());
        let y0 = y0.max(T::zero());
        let x1 = x1.min(width);
        let y1 = y1.min(height);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(Self::from_corners(x0, y0, x1, y1, self.class_id, self.score).expect("positive area"))
    }

    pub fn shifted(&self, dx: T, dy: T) -> Self {
        Self { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            cx: self.cx * factor,
            cy: self.cy * factor,
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }
}

/// All detections of one image, in a stable order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet<T> {
    pub image_id: u64,
    pub boxes: Vec<BBox<T>>,
}

impl<T: Scalar> DetectionSet<T> {
    pub fn new(image_id: u64) -> Self {
        Self { image_id, boxes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Intersection-over-union of two boxes. Degenerate overlap yields 0, never a
/// division failure.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(T::zero());
    let ih = (ay1.min(by1) - ay0.max(by0)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    inter / union
}

/// Shape-only IoU of two (w, h) extents with aligned centers; used for
/// anchor matching.
pub fn shape_iou<T: Scalar>(wa: T, ha: T, wb: T, hb: T) -> T {
    let inter = wa.min(wb) * ha.min(hb);
    let union = wa * ha + wb * hb - inter;
    inter / union
}

// ---------------------------------------------------------------------------
// CIoU, written once over a numeric kind so the loss engine can evaluate it
// on dual numbers and get exact analytic derivatives.
// ---------------------------------------------------------------------------

/// Arithmetic surface needed by the CIoU formula.
pub(crate) trait SmoothNum:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    fn constant(c: f64) -> Self;
    fn value(self) -> f64;
    fn atan(self) -> Self;
    /// max with branch derivative (subgradient follows the winning argument).
    fn vmax(self, other: Self) -> Self;
    fn vmin(self, other: Self) -> Self;
}

impl<T: Scalar> SmoothNum for T {
    fn constant(c: f64) -> Self {
        T::of(c)
    }
    fn value(self) -> f64 {
        self.as_f64()
    }
    fn atan(self) -> Self {
        Float::atan(self)
    }
    fn vmax(self, other: Self) -> Self {
        self.max(other)
    }
    fn vmin(self, other: Self) -> Self {
        self.min(other)
    }
}

/// Forward-mode dual number carrying derivatives w.r.t. four inputs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dual4<T> {
    pub v: T,
    pub d: [T; 4],
}

impl<T: Scalar> Dual4<T> {
    pub fn var(v: T, slot: usize) -> Self {
        let mut d = [T::zero(); 4];
        d[slot] = T::one();
        Self { v, d }
    }

    pub fn lift(v: T) -> Self {
        Self { v, d: [T::zero(); 4] }
    }

    fn map2(self, other: Self, v: T, f: impl Fn(T, T) -> T) -> Self {
        let mut d = [T::zero(); 4];
        for i in 0..4 {
            d[i] = f(self.d[i], other.d[i]);
        }
        Self { v, d }
    }
}

impl<T: Scalar> Add for Dual4<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.map2(rhs, self.v + rhs.v, |a, b| a + b)
    }
}

impl<T: Scalar> Sub for Dual4<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.map2(rhs, self.v - rhs.v, |a, b| a - b)
    }
}

impl<T: Scalar> Mul for Dual4<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.map2(rhs, self.v * rhs.v, |a, b| a * rhs.v + self.v * b)
    }
}

impl<T: Scalar> Div for Dual4<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.v;
        self.map2(rhs, self.v * inv, |a, b| (a - self.v * inv * b) * inv)
    }
}

impl<T: Scalar> SmoothNum for Dual4<T> {
    fn constant(c: f64) -> Self {
        Self::lift(T::of(c))
    }
    fn value(self) -> f64 {
        self.v.as_f64()
    }
    fn atan(self) -> Self {
        let scale = T::one() / (T::one() + self.v * self.v);
        let mut d = [T::zero(); 4];
        for i in 0..4 {
            d[i] = self.d[i] * scale;
        }
        Self { v: Float::atan(self.v), d }
    }
    fn vmax(self, other: Self) -> Self {
        if self.v >= other.v {
            self
        } else {
            other
        }
    }
    fn vmin(self, other: Self) -> Self {
        if self.v <= other.v {
            self
        } else {
            other
        }
    }
}

/// CIoU over any numeric kind. Boxes are (cx, cy, w, h) with w, h > 0.
pub(crate) fn ciou_generic<V: SmoothNum>(pred: [V; 4], gt: [V; 4]) -> V {
    let half = V::constant(0.5);
    let zero = V::constant(0.0);
    let one = V::constant(1.0);

    let [pcx, pcy, pw, ph] = pred;
    let [gcx, gcy, gw, gh] = gt;
    let (px0, py0, px1, py1) = (pcx - pw * half, pcy - ph * half, pcx + pw * half, pcy + ph * half);
    let (gx0, gy0, gx1, gy1) = (gcx - gw * half, gcy - gh * half, gcx + gw * half, gcy + gh * half);

    let iw = (px1.vmin(gx1) - px0.vmax(gx0)).vmax(zero);
    let ih = (py1.vmin(gy1) - py0.vmax(gy0)).vmax(zero);
    let inter = iw * ih;
    let union = pw * ph + gw * gh - inter;
    let iou = inter / union;

    let cw = px1.vmax(gx1) - px0.vmin(gx0);
    let ch = py1.vmax(gy1) - py0.vmin(gy0);
    let c2 = cw * cw + ch * ch;
    let rho2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy);

    let factor = V::constant(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let da = (gw / gh).atan() - (pw / ph).atan();
    let v = factor * da * da;

    // v == 0 collapses the aspect penalty; the limit of alpha*v is 0 there,
    // which also avoids 0/0 for identical boxes.
    let aspect = if v.value() == 0.0 {
        zero
    } else {
        let alpha = v / (one - iou + v);
        alpha * v
    };

    one - iou + rho2 / c2 + aspect
}

/// Complete-IoU loss: `1 - IoU + rho^2/c^2 + alpha*v`. Zero iff the boxes are
/// identical.
pub fn ciou_loss<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> T {
    ciou_generic([pred.cx, pred.cy, pred.w, pred.h], [gt.cx, gt.cy, gt.w, gt.h])
}

/// CIoU and its gradient w.r.t. the predicted (cx, cy, w, h).
pub fn ciou_loss_grad<T: Scalar>(pred: [T; 4], gt: [T; 4]) -> (T, [T; 4]) {
    let p = [
        Dual4::var(pred[0], 0),
        Dual4::var(pred[1], 1),
        Dual4::var(pred[2], 2),
        Dual4::var(pred[3], 3),
    ];
    let g = gt.map(Dual4::lift);
    let out = ciou_generic(p, g);
    (out.v, out.d)
}

// ---------------------------------------------------------------------------
// Non-maximum suppression
// ---------------------------------------------------------------------------

/// Greedy class-wise NMS over a box slice; returns surviving indices in
/// descending-score order (ties broken by lower original index).
pub fn nms_indices<T: Scalar>(
    boxes: &[BBox<T>],
    iou_threshold: T,
    score_threshold: T,
) -> Result<Vec<usize>> {
    for (name, t) in [("iou_threshold", iou_threshold), ("score_threshold", score_threshold)] {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::config(format!("{name} must be in [0,1], got {t}")));
        }
    }
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| cmp_score_desc((boxes[a].score, a), (boxes[b].score, b)));

    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] || boxes[j].class_id != boxes[i].class_id {
                continue;
            }
            if iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Greedy class-wise NMS by descending score; ties broken by lower original
/// index. Survivors never overlap a same-class survivor above
/// `iou_threshold`, and all carry `score >= score_threshold`.
pub fn nms<T: Scalar>(
    dets: &DetectionSet<T>,
    iou_threshold: T,
    score_threshold: T,
) -> Result<DetectionSet<T>> {
    let kept = nms_indices(&dets.boxes, iou_threshold, score_threshold)?;
    Ok(DetectionSet {
        image_id: dets.image_id,
        boxes: kept.into_iter().map(|i| dets.boxes[i]).collect(),
    })
}

// ---------------------------------------------------------------------------
// Anchor-grid encoding
// ---------------------------------------------------------------------------

/// Location of an assignment on one pyramid level's grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
}

/// Per-cell regression target: center offsets from the cell center in
/// stride units plus log size ratios against the anchor.
pub type RegTarget<T> = [T; 4];

/// Encodes a box against `(stride, anchor)`: offsets are relative to the
/// center of the cell containing the box center, sizes are log ratios.
/// The cell index is clamped to the grid so edge boxes still round-trip.
pub fn encode_box_to_grid<T: Scalar>(
    b: &BBox<T>,
    image_size: usize,
    stride: usize,
    anchor: (T, T),
) -> Result<(GridCell, RegTarget<T>)> {
    if stride == 0 || image_size % stride != 0 {
        return Err(Error::shape(format!(
            "stride {stride} does not divide image size {image_size}"
        )));
    }
    if !(anchor.0 > T::zero() && anchor.1 > T::zero()) {
        return Err(Error::config("anchor dimensions must be positive".to_string()));
    }
    let size = T::of_usize(image_size);
    if b.cx < T::zero() || b.cx > size || b.cy < T::zero() || b.cy > size {
        return Err(Error::OutOfBounds(format!(
            "box center ({}, {}) outside image of size {image_size}",
            b.cx, b.cy
        )));
    }
    let grid = image_size / stride;
    let stride_t = T::of_usize(stride);
    let col = ((b.cx / stride_t).floor().as_f64() as isize).clamp(0, grid as isize - 1) as usize;
    let row = ((b.cy / stride_t).floor().as_f64() as isize).clamp(0, grid as isize - 1) as usize;
    let half = T::of(0.5);
    let target = [
        b.cx / stride_t - (T::of_usize(col) + half),
        b.cy / stride_t - (T::of_usize(row) + half),
        (b.w / anchor.0).ln(),
        (b.h / anchor.1).ln(),
    ];
    Ok((GridCell { row, col }, target))
}

/// Inverse of [`encode_box_to_grid`]. Raw head outputs pass through the same
/// map, so the exp keeps decoded sizes positive for any real input; its
/// argument is clamped to avoid overflow on wild logits.
pub fn decode_grid_box<T: Scalar>(
    cell: GridCell,
    t: &RegTarget<T>,
    stride: usize,
    anchor: (T, T),
    class_id: usize,
    score: T,
) -> BBox<T> {
    let stride_t = T::of_usize(stride);
    let half = T::of(0.5);
    let lim = T::of(10.0);
    BBox {
        cx: (T::of_usize(cell.col) + half + t[0]) * stride_t,
        cy: (T::of_usize(cell.row) + half + t[1]) * stride_t,
        w: anchor.0 * t[2].min(lim).max(-lim).exp(),
        h: anchor.1 * t[3].min(lim).max(-lim).exp(),
        class_id,
        score,
    }
}
