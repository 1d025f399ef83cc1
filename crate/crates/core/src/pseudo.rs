//! Teacher-side pseudo-label generation on weakly-augmented unlabeled images
//! and the adaptive assigner that maps pseudo boxes onto per-cell targets
//! with a reliable / unreliable / background categorization.

use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::detector::{decode_cells, AnchorConfig, DetectorArch, DetectorParams};
use crate::epoch::{categorize_score, Category, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox};
use crate::loss::{assign_to_grid, Assignment, ConflictRule, PseudoTargets};
use crate::scalar::Scalar;

/// One teacher detection kept as a pseudo label. The box score is the
/// pseudo-label score `p = obj_prob * max(class_dist)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel<T> {
    pub bbox: BBox<T>,
    pub class_dist: Vec<T>,
    pub obj_prob: T,
}

impl<T: Scalar> PseudoLabel<T> {
    pub fn new(bbox: BBox<T>, class_dist: Vec<T>, obj_prob: T) -> Result<Self> {
        let tol = T::of(1e-6);
        let sum: T = class_dist.iter().copied().fold(T::zero(), |a, b| a + b);
        if (sum - T::one()).abs() > tol {
            return Err(Error::config(format!("class_dist must sum to 1, got {sum}")));
        }
        if !(obj_prob >= T::zero() && obj_prob <= T::one()) {
            return Err(Error::config("obj_prob must be in [0,1]"));
        }
        let maxp = class_dist.iter().copied().fold(T::zero(), T::max);
        if (bbox.score - obj_prob * maxp).abs() > tol {
            return Err(Error::config(format!(
                "score {} must equal obj_prob * max(class_dist) = {}",
                bbox.score,
                obj_prob * maxp
            )));
        }
        Ok(Self { bbox, class_dist, obj_prob })
    }

    pub fn score(&self) -> T {
        self.bbox.score
    }

    pub fn argmax_class(&self) -> usize {
        self.class_dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite dist").then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty class distribution")
    }
}

/// Teacher inference on a weakly-augmented image: forward (with the
/// configured multi-scale spec), per-cell decode above `conf_floor`, then
/// class-wise NMS. Each survivor keeps the class distribution and objectness
/// probability of its source cell.
pub fn generate_pseudo_labels<T: Scalar>(
    arch: &DetectorArch<T>,
    teacher: &DetectorParams<T>,
    weak_image: &Array3<T>,
    conf_floor: T,
    nms_iou: T,
) -> Result<Vec<PseudoLabel<T>>> {
    let (_, preds) = arch.infer(teacher, weak_image)?;
    let cells = decode_cells(&preds, conf_floor)?;
    let boxes: Vec<BBox<T>> = cells.iter().map(|c| c.bbox).collect();
    let kept = nms_indices(&boxes, nms_iou, conf_floor)?;
    kept.into_iter()
        .map(|i| PseudoLabel::new(cells[i].bbox, cells[i].class_dist.clone(), cells[i].obj_prob))
        .collect()
}

/// Maps pseudo labels onto dense per-cell targets using the same
/// best-anchor-at-center rule as supervised assignment; cell conflicts are
/// resolved by higher score, then lower label index. Unassigned cells keep
/// `p = 0`.
pub fn assign_pseudo_targets<T: Scalar>(
    labels: &[PseudoLabel<T>],
    cfg: &AnchorConfig<T>,
    image_size: usize,
) -> PseudoTargets<T> {
    let boxes: Vec<BBox<T>> = labels.iter().map(|l| l.bbox).collect();
    let (assigns, _) = assign_to_grid(&boxes, cfg, image_size, ConflictRule::HigherScore);
    let mut pt = PseudoTargets::empty(cfg, image_size);
    for a in assigns {
        let label = &labels[a.box_idx];
        let lvl = &mut pt.levels[a.level];
        let (an, row, col) = (a.anchor, a.cell.row, a.cell.col);
        lvl.p[[an, row, col]] = label.score();
        for (c, &d) in label.class_dist.iter().enumerate() {
            lvl.soft_cls[[an, c, row, col]] = d;
        }
        lvl.soft_obj_target[[an, row, col]] = label.obj_prob;
        lvl.soft_obj[[an, row, col]] = label.obj_prob;
        lvl.cls_argmax[[an, row, col]] = label.argmax_class();
        lvl.soft_reg.push(Assignment { anchor: an, cell: a.cell, gt: label.bbox });
    }
    pt
}

/// Per-cell category masks for every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMasks {
    pub levels: Vec<Array3<Category>>,
}

impl AssignmentMasks {
    pub fn count(&self, cat: Category) -> usize {
        self.levels
            .iter()
            .map(|l| l.iter().filter(|&&c| c == cat).count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }
}

/// Applies the per-class dual thresholds of each cell's argmax class.
pub fn categorize<T: Scalar>(
    pt: &PseudoTargets<T>,
    schedule: &ThresholdSchedule<T>,
) -> Result<AssignmentMasks> {
    if schedule.per_class.len() != pt.num_classes {
        return Err(Error::config("schedule classes do not match pseudo targets"));
    }
    for &(t1, t2) in &schedule.per_class {
        if t1 > t2 {
            return Err(Error::config(format!("tau1 {t1} exceeds tau2 {t2}")));
        }
    }
    let levels = pt
        .levels
        .iter()
        .map(|lvl| {
            let dim = lvl.p.dim();
            Array3::from_shape_fn(dim, |(an, row, col)| {
                let c = lvl.cls_argmax[[an, row, col]];
                let (t1, t2) = schedule.per_class[c];
                categorize_score(lvl.p[[an, row, col]], t1, t2)
            })
        })
        .collect();
    Ok(AssignmentMasks { levels })
}

/// Saved form of one image's pseudo labels (the `inspect-pseudo` dump).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoDump<T> {
    pub image_id: u64,
    pub labels: Vec<PseudoLabel<T>>,
}

/// Convenience for tests and dumps: teacher objectness map of one level.
pub fn level_p_map<T: Scalar>(pt: &PseudoTargets<T>, level: usize) -> ArrayD<T> {
    pt.levels[level].p.clone().into_dyn()
}
