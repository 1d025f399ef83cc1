//! Training objectives: the supervised dense-detection loss, the three
//! unsupervised losses gated by per-class pseudo-label thresholds, their
//! composition, and the burn-in loss with the domain-adaptation term.
//!
//! Every loss comes in a value-only form and a fused graph-node form whose
//! backward uses the analytic gradients computed alongside the value.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::detector::{sigmoid, DensePredictions, DetectorArch, LevelPred};
use crate::epoch::{categorize_score, Category, DomainPrediction};
use crate::error::{Error, Result};
use crate::geometry::{ciou_loss_grad, shape_iou, BBox, DetectionSet, GridCell};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

/// Largest tolerated anchor/box size ratio (either direction, both dims).
const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// One positive assignment on a level grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment<T> {
    pub anchor: usize,
    pub cell: GridCell,
    pub gt: BBox<T>,
}

/// Supervised targets for one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTargets<T> {
    pub stride: usize,
    pub grid: (usize, usize),
    pub num_anchors: usize,
    pub positives: Vec<Assignment<T>>,
}

/// Dense supervised targets: objectness 1 at positives and 0 elsewhere,
/// one-hot class and the ground-truth box at positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTargets<T> {
    pub num_classes: usize,
    pub levels: Vec<LevelTargets<T>>,
    /// Ground-truth boxes that matched no anchor at any level.
    pub dropped_gt: usize,
}

impl<T: Scalar> DenseTargets<T> {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives.len()).sum()
    }
}

/// Per-cell pseudo targets for one level. `p` is 0 where no pseudo label is
/// assigned; `soft_*` fields are meaningful only where `p > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPseudo<T> {
    pub stride: usize,
    pub grid: (usize, usize),
    pub num_anchors: usize,
    /// Pseudo-label score per (anchor, row, col).
    pub p: Array3<T>,
    /// Teacher class distribution, `[A, C, H, W]`; rows sum to 1 where p > 0.
    pub soft_cls: Array4<T>,
    /// Teacher box per assigned cell.
    pub soft_reg: Vec<Assignment<T>>,
    /// Objectness target for reliable cells.
    pub soft_obj_target: Array3<T>,
    /// Teacher objectness probability, the soft target for unreliable cells.
    pub soft_obj: Array3<T>,
    /// Argmax class of `soft_cls` (threshold lookup key); 0 where unassigned.
    pub cls_argmax: Array3<usize>,
}

/// Pseudo targets across all levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTargets<T> {
    pub num_classes: usize,
    pub levels: Vec<LevelPseudo<T>>,
}

impl<T: Scalar> PseudoTargets<T> {
    pub fn empty(cfg: &crate::detector::AnchorConfig<T>, image_size: usize) -> Self {
        let levels = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(l, &stride)| {
                let g = image_size / stride;
                let a = cfg.anchors_per_level[l].len();
                LevelPseudo {
                    stride,
                    grid: (g, g),
                    num_anchors: a,
                    p: Array3::zeros((a, g, g)),
                    soft_cls: Array4::zeros((a, cfg.num_classes, g, g)),
                    soft_reg: Vec::new(),
                    soft_obj_target: Array3::zeros((a, g, g)),
                    soft_obj: Array3::zeros((a, g, g)),
                    cls_argmax: Array3::from_elem((a, g, g), 0),
                }
            })
            .collect();
        Self { num_classes: cfg.num_classes, levels }
    }

    pub fn num_assigned(&self) -> usize {
        self.levels.iter().map(|l| l.soft_reg.len()).sum()
    }
}

/// Scalar components of one training step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_s: T,
    pub l_u_cls: T,
    pub l_u_reg: T,
    pub l_u_obj: T,
    pub l_u: T,
    pub l_da: T,
    pub lambda_u: T,
    pub lambda_da: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn compose(
        l_s: T,
        parts: UnsupParts<T>,
        l_da: T,
        lambda_u: T,
        lambda_da: T,
    ) -> Self {
        let l_u = parts.cls + parts.reg + parts.obj;
        Self {
            l_s,
            l_u_cls: parts.cls,
            l_u_reg: parts.reg,
            l_u_obj: parts.obj,
            l_u,
            l_da,
            lambda_u,
            lambda_da,
            total: l_s + lambda_u * l_u + lambda_da * l_da,
        }
    }

    pub fn supervised_only(l_s: T) -> Self {
        Self::compose(l_s, UnsupParts::zero(), T::zero(), T::zero(), T::zero())
    }
}

/// The three unsupervised loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnsupParts<T> {
    pub cls: T,
    pub reg: T,
    pub obj: T,
}

impl<T: Scalar> UnsupParts<T> {
    pub fn zero() -> Self {
        Self { cls: T::zero(), reg: T::zero(), obj: T::zero() }
    }

    pub fn sum(&self) -> T {
        self.cls + self.reg + self.obj
    }
}

// ---------------------------------------------------------------------------
// Anchor assignment
// ---------------------------------------------------------------------------

/// How to resolve two boxes claiming the same (level, anchor, cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ConflictRule {
    /// First (lower-index) box wins.
    LowerIndex,
    /// Higher score wins; ties fall back to lower index.
    HigherScore,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CellAssign {
    pub level: usize,
    pub anchor: usize,
    pub cell: GridCell,
    pub box_idx: usize,
}

/// Assigns each box to the best shape-IoU anchor at the cell containing its
/// center, independently per level, considering only anchors whose size
/// ratio against the box stays within [1/4, 4] in both dimensions.
/// Returns the assignments plus the count of boxes that matched nowhere.
pub(crate) fn assign_to_grid<T: Scalar>(
    boxes: &[BBox<T>],
    cfg: &crate::detector::AnchorConfig<T>,
    image_size: usize,
    rule: ConflictRule,
) -> (Vec<CellAssign>, usize) {
    let limit = T::of(ANCHOR_RATIO_LIMIT);
    let mut claimed: std::collections::HashMap<(usize, usize, usize, usize), usize> =
        std::collections::HashMap::new();
    let mut dropped = 0usize;
    for (bi, b) in boxes.iter().enumerate() {
        let mut hit = false;
        for (level, &stride) in cfg.strides.iter().enumerate() {
            let grid = image_size / stride;
            let col = ((b.cx.as_f64() / stride as f64).floor() as isize)
                .clamp(0, grid as isize - 1) as usize;
            let row = ((b.cy.as_f64() / stride as f64).floor() as isize)
                .clamp(0, grid as isize - 1) as usize;
            let mut best: Option<(usize, T)> = None;
            for (ai, &(aw, ah)) in cfg.anchors_per_level[level].iter().enumerate() {
                let ratio = (b.w / aw)
                    .max(aw / b.w)
                    .max(b.h / ah)
                    .max(ah / b.h);
                if ratio > limit {
                    continue;
                }
                let s = shape_iou(b.w, b.h, aw, ah);
                if best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((ai, s));
                }
            }
            let Some((anchor, _)) = best else { continue };
            hit = true;
            let key = (level, anchor, row, col);
            match claimed.get(&key) {
                None => {
                    claimed.insert(key, bi);
                }
                Some(&prev) => {
                    let replace = match rule {
                        ConflictRule::LowerIndex => false,
                        ConflictRule::HigherScore => boxes[bi].score > boxes[prev].score,
                    };
                    if replace {
                        claimed.insert(key, bi);
                    }
                }
            }
        }
        if !hit {
            dropped += 1;
        }
    }
    let mut out: Vec<CellAssign> = claimed
        .into_iter()
        .map(|((level, anchor, row, col), box_idx)| CellAssign {
            level,
            anchor,
            cell: GridCell { row, col },
            box_idx,
        })
        .collect();
    out.sort_by_key(|a| (a.level, a.anchor, a.cell.row, a.cell.col));
    (out, dropped)
}

/// Builds dense supervised targets from ground truth; boxes matching no
/// anchor are dropped and counted.
pub fn build_supervised_targets<T: Scalar>(
    gt: &DetectionSet<T>,
    cfg: &crate::detector::AnchorConfig<T>,
    image_size: usize,
) -> DenseTargets<T> {
    let (assigns, dropped) = assign_to_grid(&gt.boxes, cfg, image_size, ConflictRule::LowerIndex);
    let mut levels: Vec<LevelTargets<T>> = cfg
        .strides
        .iter()
        .enumerate()
        .map(|(l, &stride)| LevelTargets {
            stride,
            grid: (image_size / stride, image_size / stride),
            num_anchors: cfg.anchors_per_level[l].len(),
            positives: Vec::new(),
        })
        .collect();
    for a in assigns {
        levels[a.level].positives.push(Assignment {
            anchor: a.anchor,
            cell: a.cell,
            gt: gt.boxes[a.box_idx],
        });
    }
    DenseTargets { num_classes: cfg.num_classes, levels, dropped_gt: dropped }
}

// ---------------------------------------------------------------------------
// Shared numeric pieces
// ---------------------------------------------------------------------------

/// Stable binary cross-entropy with logits; returns (value, d/d logit).
#[inline]
fn bce_logit<T: Scalar>(x: T, t: T) -> (T, T) {
    let v = x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
    (v, sigmoid(x) - t)
}

/// Softmax cross-entropy against a distribution; returns (value, d/d logits).
fn softmax_ce<T: Scalar>(logits: &[T], target: &[T]) -> (T, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - m).exp()).fold(T::zero(), |a, b| a + b);
    let lse = m + sum.ln();
    let mut v = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(target) {
        v = v - t * (l - lse);
        grad.push((l - m).exp() / sum - t);
    }
    (v, grad)
}

const CH_REG: usize = 0;
const CH_OBJ: usize = 4;
const CH_CLS: usize = 5;

fn per_anchor<T: Scalar>(lp: &LevelPred<T>) -> usize {
    5 + lp.num_classes
}

fn total_cells<T: Scalar>(preds: &DensePredictions<T>) -> usize {
    preds
        .levels
        .iter()
        .map(|l| {
            let (h, w) = l.grid();
            l.num_anchors() * h * w
        })
        .sum()
}

fn check_shapes<T: Scalar>(preds: &DensePredictions<T>, levels: usize, grids: &[(usize, usize)]) -> Result<()> {
    if preds.levels.len() != levels {
        return Err(Error::shape(format!(
            "predictions have {} levels, targets {}",
            preds.levels.len(),
            levels
        )));
    }
    for (lp, &g) in preds.levels.iter().zip(grids) {
        if lp.grid() != g {
            return Err(Error::shape(format!(
                "level grid {:?} does not match target grid {:?}",
                lp.grid(),
                g
            )));
        }
    }
    Ok(())
}

/// CIoU between the decoded prediction at a cell and a target box, with the
/// gradient w.r.t. the four raw regression channels.
fn cell_ciou<T: Scalar>(
    lp: &LevelPred<T>,
    anchor: usize,
    cell: GridCell,
    target: &BBox<T>,
) -> (T, [T; 4]) {
    let raw = lp.reg(anchor, cell.row, cell.col);
    let (aw, ah) = lp.anchors[anchor];
    let s = T::of_usize(lp.stride);
    let half = T::of(0.5);
    let lim = T::of(10.0);
    let cx = (T::of_usize(cell.col) + half + raw[0]) * s;
    let cy = (T::of_usize(cell.row) + half + raw[1]) * s;
    let tw = raw[2].min(lim).max(-lim);
    let th = raw[3].min(lim).max(-lim);
    let w = aw * tw.exp();
    let h = ah * th.exp();
    let (v, dbox) = ciou_loss_grad([cx, cy, w, h], [target.cx, target.cy, target.w, target.h]);
    // chain through the decode: dcx/dtx = stride, dw/dtw = w (0 when clamped)
    let dw_dtw = if raw[2].abs() < lim { w } else { T::zero() };
    let dh_dth = if raw[3].abs() < lim { h } else { T::zero() };
    (v, [dbox[0] * s, dbox[1] * s, dbox[2] * dw_dtw, dbox[3] * dh_dth])
}

fn zero_grads<T: Scalar>(preds: &DensePredictions<T>) -> Vec<Array3<T>> {
    preds
        .levels
        .iter()
        .map(|l| Array3::zeros(l.data.dim()))
        .collect()
}

// ---------------------------------------------------------------------------
// Supervised loss
// ---------------------------------------------------------------------------

/// Component weights of the supervised loss. The objectness term keeps unit
/// overall weight; `obj_pos_weight` scales positive cells inside its
/// weighted mean to counter the foreground/background imbalance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupLossWeights<T> {
    pub cls: T,
    pub reg: T,
    pub obj_pos_weight: T,
}

impl<T: Scalar> Default for SupLossWeights<T> {
    fn default() -> Self {
        Self { cls: T::one(), reg: T::one(), obj_pos_weight: T::one() }
    }
}

/// Supervised dense loss: softmax CE over classes and CIoU at positives
/// (each averaged over `max(1, positives)`), objectness BCE over every cell
/// (a weighted mean; positive cells carry `obj_pos_weight`).
pub fn supervised_loss<T: Scalar>(
    preds: &DensePredictions<T>,
    targets: &DenseTargets<T>,
) -> Result<T> {
    supervised_loss_with_grad(preds, targets, false).map(|(v, _)| v)
}

pub fn supervised_loss_with_grad<T: Scalar>(
    preds: &DensePredictions<T>,
    targets: &DenseTargets<T>,
    want_grad: bool,
) -> Result<(T, Vec<Array3<T>>)> {
    supervised_loss_balanced(preds, targets, SupLossWeights::default(), want_grad)
}

pub fn supervised_loss_balanced<T: Scalar>(
    preds: &DensePredictions<T>,
    targets: &DenseTargets<T>,
    w: SupLossWeights<T>,
    want_grad: bool,
) -> Result<(T, Vec<Array3<T>>)> {
    check_shapes(
        preds,
        targets.levels.len(),
        &targets.levels.iter().map(|l| l.grid).collect::<Vec<_>>(),
    )?;
    let n_pos = T::of_usize(targets.num_positives().max(1));
    let pos_w = w.obj_pos_weight;
    // weighted cell count: positives count pos_w times
    let n_all = T::of_usize(total_cells(preds))
        + (pos_w - T::one()) * T::of_usize(targets.num_positives());
    let mut grads = if want_grad { zero_grads(preds) } else { Vec::new() };

    let mut cls_sum = T::zero();
    let mut reg_sum = T::zero();
    let mut obj_sum = T::zero();
    for (li, (lp, lt)) in preds.levels.iter().zip(&targets.levels).enumerate() {
        let pa = per_anchor(lp);
        let (h, wd) = lp.grid();
        // objectness target: 1 at positive cells
        let mut positive = std::collections::HashSet::new();
        for a in &lt.positives {
            positive.insert((a.anchor, a.cell.row, a.cell.col));
        }
        for an in 0..lp.num_anchors() {
            for row in 0..h {
                for col in 0..wd {
                    let is_pos = positive.contains(&(an, row, col));
                    let t = if is_pos { T::one() } else { T::zero() };
                    let cw = if is_pos { pos_w } else { T::one() };
                    let (v, d) = bce_logit(lp.obj_logit(an, row, col), t);
                    obj_sum = obj_sum + cw * v;
                    if want_grad {
                        grads[li][[an * pa + CH_OBJ, row, col]] += cw * d / n_all;
                    }
                }
            }
        }
        for a in &lt.positives {
            let (row, col) = (a.cell.row, a.cell.col);
            let logits = lp.cls_logits(a.anchor, row, col);
            let mut one_hot = vec![T::zero(); lp.num_classes];
            one_hot[a.gt.class_id] = T::one();
            let (cv, cg) = softmax_ce(&logits, &one_hot);
            cls_sum = cls_sum + cv;
            let (rv, rg) = cell_ciou(lp, a.anchor, a.cell, &a.gt);
            reg_sum = reg_sum + rv;
            if want_grad {
                for (c, d) in cg.iter().enumerate() {
                    grads[li][[a.anchor * pa + CH_CLS + c, row, col]] += w.cls * *d / n_pos;
                }
                for (k, d) in rg.iter().enumerate() {
                    grads[li][[a.anchor * pa + CH_REG + k, row, col]] += w.reg * *d / n_pos;
                }
            }
        }
    }
    Ok((w.cls * cls_sum / n_pos + w.reg * reg_sum / n_pos + obj_sum / n_all, grads))
}

// ---------------------------------------------------------------------------
// Unsupervised losses (per-class dual thresholds)
// ---------------------------------------------------------------------------

fn check_taus<T: Scalar>(tau1: &[T], tau2: &[T], classes: usize) -> Result<()> {
    if tau1.len() != classes || tau2.len() != classes {
        return Err(Error::config(format!(
            "expected {classes} per-class thresholds, got {} / {}",
            tau1.len(),
            tau2.len()
        )));
    }
    for (a, b) in tau1.iter().zip(tau2) {
        if a > b {
            return Err(Error::config(format!("tau1 {a} exceeds tau2 {b}")));
        }
    }
    Ok(())
}

/// Classification loss over cells whose pseudo score reaches the per-class
/// high threshold: CE between predicted class logits and the teacher's soft
/// distribution; averaged over the count of cells carrying a pseudo label
/// (threshold-independent, so raising tau2 can only shrink the sum).
pub fn unsup_cls_loss<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau2: &[T],
) -> Result<T> {
    unsup_cls_loss_with_grad(preds, pt, tau2, false).map(|(v, _)| v)
}

pub fn unsup_cls_loss_with_grad<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau2: &[T],
    want_grad: bool,
) -> Result<(T, Vec<Array3<T>>)> {
    check_shapes(preds, pt.levels.len(), &pt.levels.iter().map(|l| l.grid).collect::<Vec<_>>())?;
    if tau2.len() != pt.num_classes {
        return Err(Error::config("tau2 must have one entry per class"));
    }
    let n_assigned = T::of_usize(pt.num_assigned().max(1));
    let mut grads = if want_grad { zero_grads(preds) } else { Vec::new() };
    let mut sum = T::zero();
    for (li, (lp, lt)) in preds.levels.iter().zip(&pt.levels).enumerate() {
        let pa = per_anchor(lp);
        for a in &lt.soft_reg {
            let (an, row, col) = (a.anchor, a.cell.row, a.cell.col);
            let c_star = lt.cls_argmax[[an, row, col]];
            if lt.p[[an, row, col]] < tau2[c_star] {
                continue;
            }
            let logits = lp.cls_logits(an, row, col);
            let target: Vec<T> =
                (0..lp.num_classes).map(|c| lt.soft_cls[[an, c, row, col]]).collect();
            let (v, g) = softmax_ce(&logits, &target);
            sum = sum + v;
            if want_grad {
                for (c, d) in g.iter().enumerate() {
                    grads[li][[an * pa + CH_CLS + c, row, col]] += *d / n_assigned;
                }
            }
        }
    }
    Ok((sum / n_assigned, grads))
}

/// Regression loss over cells passing `p >= tau2` or whose teacher
/// objectness exceeds `obj_gate` (0.99 by default): CIoU between the decoded
/// prediction and the teacher box; averaged over the count of cells carrying
/// a pseudo label.
pub fn unsup_reg_loss<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau2: &[T],
    obj_gate: T,
) -> Result<T> {
    unsup_reg_loss_with_grad(preds, pt, tau2, obj_gate, false).map(|(v, _)| v)
}

pub fn unsup_reg_loss_with_grad<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau2: &[T],
    obj_gate: T,
    want_grad: bool,
) -> Result<(T, Vec<Array3<T>>)> {
    check_shapes(preds, pt.levels.len(), &pt.levels.iter().map(|l| l.grid).collect::<Vec<_>>())?;
    if tau2.len() != pt.num_classes {
        return Err(Error::config("tau2 must have one entry per class"));
    }
    let n_assigned = T::of_usize(pt.num_assigned().max(1));
    let mut grads = if want_grad { zero_grads(preds) } else { Vec::new() };
    let mut sum = T::zero();
    for (li, (lp, lt)) in preds.levels.iter().zip(&pt.levels).enumerate() {
        let pa = per_anchor(lp);
        for a in &lt.soft_reg {
            let (an, row, col) = (a.anchor, a.cell.row, a.cell.col);
            let c_star = lt.cls_argmax[[an, row, col]];
            let gate = lt.p[[an, row, col]] >= tau2[c_star]
                || lt.soft_obj[[an, row, col]] > obj_gate;
            if !gate {
                continue;
            }
            let (v, g) = cell_ciou(lp, an, a.cell, &a.gt);
            sum = sum + v;
            if want_grad {
                for (k, d) in g.iter().enumerate() {
                    grads[li][[an * pa + CH_REG + k, row, col]] += *d / n_assigned;
                }
            }
        }
    }
    Ok((sum / n_assigned, grads))
}

/// Options controlling the unsupervised objectness loss.
#[derive(Debug, Clone, Copy)]
pub struct ObjLossOpts<T> {
    /// When false the `tau1 < p < tau2` soft-objectness branch is dropped
    /// (those cells contribute nothing) — the "unreliable labels ignored"
    /// ablation.
    pub unreliable_branch: bool,
    /// Teacher-objectness gate of the regression loss, shared here for
    /// breakdown logging symmetry.
    pub obj_gate: T,
}

impl<T: Scalar> Default for ObjLossOpts<T> {
    fn default() -> Self {
        Self { unreliable_branch: true, obj_gate: T::of(0.99) }
    }
}

/// Objectness loss over every cell, split by the pseudo-score band:
/// background (`p <= tau1`) pulls toward 0, reliable (`p >= tau2`) toward the
/// reliable target, and the band in between toward the teacher's soft
/// objectness. Averaged over the total cell count.
pub fn unsup_obj_loss<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau1: &[T],
    tau2: &[T],
    opts: ObjLossOpts<T>,
) -> Result<T> {
    unsup_obj_loss_with_grad(preds, pt, tau1, tau2, opts, false).map(|(v, _)| v)
}

pub fn unsup_obj_loss_with_grad<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau1: &[T],
    tau2: &[T],
    opts: ObjLossOpts<T>,
    want_grad: bool,
) -> Result<(T, Vec<Array3<T>>)> {
    check_shapes(preds, pt.levels.len(), &pt.levels.iter().map(|l| l.grid).collect::<Vec<_>>())?;
    check_taus(tau1, tau2, pt.num_classes)?;
    let n_all = T::of_usize(total_cells(preds));
    let mut grads = if want_grad { zero_grads(preds) } else { Vec::new() };
    let mut sum = T::zero();
    for (li, (lp, lt)) in preds.levels.iter().zip(&pt.levels).enumerate() {
        let pa = per_anchor(lp);
        let (h, w) = lp.grid();
        for an in 0..lp.num_anchors() {
            for row in 0..h {
                for col in 0..w {
                    let p = lt.p[[an, row, col]];
                    let c = lt.cls_argmax[[an, row, col]];
                    let target = match categorize_score(p, tau1[c], tau2[c]) {
                        Category::Background => Some(T::zero()),
                        Category::Reliable => Some(lt.soft_obj_target[[an, row, col]]),
                        Category::Unreliable => {
                            if opts.unreliable_branch {
                                Some(lt.soft_obj[[an, row, col]])
                            } else {
                                None
                            }
                        }
                    };
                    let Some(t) = target else { continue };
                    let (v, d) = bce_logit(lp.obj_logit(an, row, col), t);
                    sum = sum + v;
                    if want_grad {
                        grads[li][[an * pa + CH_OBJ, row, col]] += d / n_all;
                    }
                }
            }
        }
    }
    Ok((sum / n_all, grads))
}

/// The unsupervised loss is exactly the sum of its three components.
pub fn unsupervised_loss<T: Scalar>(
    preds: &DensePredictions<T>,
    pt: &PseudoTargets<T>,
    tau1: &[T],
    tau2: &[T],
    opts: ObjLossOpts<T>,
) -> Result<(T, UnsupParts<T>)> {
    check_taus(tau1, tau2, pt.num_classes)?;
    let parts = UnsupParts {
        cls: unsup_cls_loss(preds, pt, tau2)?,
        reg: unsup_reg_loss(preds, pt, tau2, opts.obj_gate)?,
        obj: unsup_obj_loss(preds, pt, tau1, tau2, opts)?,
    };
    Ok((parts.sum(), parts))
}

/// `L = L_s + lambda_u * L_u`.
pub fn total_loss<T: Scalar>(l_s: T, l_u: T, lambda_u: T) -> T {
    l_s + lambda_u * l_u
}

/// Burn-in objective: supervised loss plus the weighted domain term.
pub fn burnin_loss<T: Scalar>(
    preds: &DensePredictions<T>,
    targets: &DenseTargets<T>,
    domain_pred: &DomainPrediction<T>,
    lambda_da: T,
) -> Result<T> {
    if lambda_da < T::zero() {
        return Err(Error::config("lambda_da must be non-negative"));
    }
    Ok(supervised_loss(preds, targets)? + lambda_da * crate::epoch::domain_loss(domain_pred))
}

// ---------------------------------------------------------------------------
// Graph nodes
// ---------------------------------------------------------------------------

/// Copies the head values off the graph for loss evaluation.
pub fn predictions_from_nodes<T: Scalar>(
    g: &Graph<T>,
    heads: &[NodeId],
    arch: &DetectorArch<T>,
) -> DensePredictions<T> {
    DensePredictions {
        levels: heads
            .iter()
            .enumerate()
            .map(|(l, &n)| LevelPred {
                stride: arch.cfg.strides[l],
                anchors: arch.cfg.anchors_per_level[l].clone(),
                num_classes: arch.cfg.num_classes,
                data: g
                    .value(n)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("head output is [C,H,W]"),
            })
            .collect(),
    }
}

fn loss_node_from<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    value: T,
    grads: Vec<Array3<T>>,
) -> NodeId {
    let parents: Vec<usize> = heads.iter().map(|h| h.0).collect();
    let backward = if g.grad_enabled() {
        Some(Box::new(move |gout: &ndarray::ArrayD<T>, _: &[&ndarray::ArrayD<T>], _: &ndarray::ArrayD<T>| {
            let s = *gout.iter().next().unwrap();
            grads.iter().map(|gr| gr.mapv(|v| v * s).into_dyn()).collect()
        }) as Box<_>)
    } else {
        None
    };
    g.push(ndarray::arr0(value).into_dyn(), parents, backward)
}

/// Supervised loss as a graph node over the head outputs.
pub fn sup_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    arch: &DetectorArch<T>,
    targets: &DenseTargets<T>,
    weights: SupLossWeights<T>,
) -> Result<NodeId> {
    let preds = predictions_from_nodes(g, heads, arch);
    let (v, grads) = supervised_loss_balanced(&preds, targets, weights, g.grad_enabled())?;
    Ok(loss_node_from(g, heads, v, grads))
}

/// Full unsupervised loss as a graph node; also returns the component values.
pub fn unsup_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    arch: &DetectorArch<T>,
    pt: &PseudoTargets<T>,
    tau1: &[T],
    tau2: &[T],
    opts: ObjLossOpts<T>,
) -> Result<(NodeId, UnsupParts<T>)> {
    check_taus(tau1, tau2, pt.num_classes)?;
    let preds = predictions_from_nodes(g, heads, arch);
    let want = g.grad_enabled();
    let (cv, cg) = unsup_cls_loss_with_grad(&preds, pt, tau2, want)?;
    let (rv, rg) = unsup_reg_loss_with_grad(&preds, pt, tau2, opts.obj_gate, want)?;
    let (ov, og) = unsup_obj_loss_with_grad(&preds, pt, tau1, tau2, opts, want)?;
    let parts = UnsupParts { cls: cv, reg: rv, obj: ov };
    let grads = if want {
        cg.into_iter()
            .zip(rg)
            .zip(og)
            .map(|((a, b), c)| a + &b + &c)
            .collect()
    } else {
        Vec::new()
    };
    Ok((loss_node_from(g, heads, parts.sum(), grads), parts))
}
