//! Detection metrics: COCO-style AP with 101-point interpolation over IoU
//! thresholds 0.50..0.95, plus precision/recall at a fixed operating point.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, DetectionSet};
use crate::scalar::Scalar;

/// Score floor and IoU threshold of the reported precision/recall.
pub const PR_SCORE_THRESHOLD: f64 = 0.25;
pub const PR_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50_95: f64,
    pub ap50: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean AP over thresholds per class; None for classes with no GT.
    pub per_class_ap: Vec<Option<f64>>,
}

struct ClassDet {
    image: usize,
    det: usize,
    score: f64,
}

/// Greedy matching at one IoU threshold for one class; returns the TP flags
/// in score order plus the number of GT boxes.
fn match_class<T: Scalar>(
    dets: &[DetectionSet<T>],
    gts: &[DetectionSet<T>],
    class: usize,
    iou_t: f64,
    score_floor: f64,
) -> (Vec<bool>, usize) {
    let mut ordered: Vec<ClassDet> = Vec::new();
    for (im, d) in dets.iter().enumerate() {
        for (di, b) in d.boxes.iter().enumerate() {
            if b.class_id == class && b.score.as_f64() >= score_floor {
                ordered.push(ClassDet { image: im, det: di, score: b.score.as_f64() });
            }
        }
    }
    ordered.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image.cmp(&b.image))
            .then(a.det.cmp(&b.det))
    });

    let mut n_gt = 0usize;
    let mut taken: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| {
            g.boxes
                .iter()
                .map(|b| {
                    if b.class_id == class {
                        n_gt += 1;
                        false
                    } else {
                        true // non-class boxes are never matchable
                    }
                })
                .collect()
        })
        .collect();

    let mut tp_flags = Vec::with_capacity(ordered.len());
    for d in &ordered {
        let det_box = &dets[d.image].boxes[d.det];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_box) in gts[d.image].boxes.iter().enumerate() {
            if gt_box.class_id != class || taken[d.image][gi] {
                continue;
            }
            let o = iou(det_box, gt_box).as_f64();
            if o >= iou_t && best.map_or(true, |(_, bo)| o > bo) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[d.image][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    (tp_flags, n_gt)
}

/// 101-point interpolated average precision from ordered TP flags.
fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // monotone non-increasing envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rc| rc >= r)
            .map_or(0.0, |i| precisions[i]);
        ap += p;
    }
    ap / 101.0
}

/// Evaluates detections against ground truth. AP50:95 averages classes with
/// GT over IoU thresholds {0.50, 0.55, .., 0.95}; precision and recall are
/// micro-averaged at score 0.25 / IoU 0.5. With no GT anywhere the result is
/// 1.0 for an empty detection set and 0.0 otherwise.
pub fn evaluate_map<T: Scalar>(
    dets: &[DetectionSet<T>],
    gts: &[DetectionSet<T>],
    num_classes: usize,
) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "detections and GT must pair per image");
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();

    let mut per_class_ap: Vec<Option<f64>> = Vec::with_capacity(num_classes);
    let mut per_class_ap50: Vec<Option<f64>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.boxes.iter().filter(|b| b.class_id == class).count())
            .sum();
        if n_gt == 0 {
            per_class_ap.push(None);
            per_class_ap50.push(None);
            continue;
        }
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in &thresholds {
            let (flags, n) = match_class(dets, gts, class, t, 0.0);
            aps.push(average_precision(&flags, n));
        }
        per_class_ap50.push(Some(aps[0]));
        per_class_ap.push(Some(aps.iter().sum::<f64>() / aps.len() as f64));
    }

    let with_gt: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let (ap50_95, ap50) = if with_gt.is_empty() {
        let any_det = dets.iter().any(|d| !d.is_empty());
        let v = if any_det { 0.0 } else { 1.0 };
        (v, v)
    } else {
        (
            with_gt.iter().sum::<f64>() / with_gt.len() as f64,
            per_class_ap50.iter().flatten().sum::<f64>()
                / per_class_ap50.iter().flatten().count() as f64,
        )
    };

    // operating-point precision/recall, micro-averaged over classes
    let (mut tp, mut n_det, mut n_gt) = (0usize, 0usize, 0usize);
    for class in 0..num_classes {
        let (flags, gt_count) = match_class(dets, gts, class, PR_IOU_THRESHOLD, PR_SCORE_THRESHOLD);
        tp += flags.iter().filter(|&&f| f).count();
        n_det += flags.len();
        n_gt += gt_count;
    }
    let precision = if n_det == 0 {
        if n_gt == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / n_det as f64
    };
    let recall = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };

    EvalResult { ap50_95, ap50, precision, recall, per_class_ap }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn set(id: u64, boxes: &[(f64, f64, f64, f64, usize, f64)]) -> DetectionSet<f64> {
        DetectionSet {
            image_id: id,
            boxes: boxes
                .iter()
                .map(|&(cx, cy, w, h, c, s)| BBox::new(cx, cy, w, h, c, s).unwrap())
                .collect(),
        }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![set(0, &[(10.0, 10.0, 6.0, 6.0, 0, 1.0)])];
        let dets = vec![set(0, &[(10.0, 10.0, 6.0, 6.0, 0, 0.9)])];
        let r = evaluate_map(&dets, &gts, 2);
        assert_eq!(r.ap50_95, 1.0);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.per_class_ap, vec![Some(1.0), None]);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![set(0, &[(10.0, 10.0, 6.0, 6.0, 0, 1.0)])];
        let dets = vec![DetectionSet::new(0)];
        let r = evaluate_map(&dets, &gts, 1);
        assert_eq!(r.ap50_95, 0.0);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
    }

    #[test]
    fn empty_gt_and_empty_dets_is_perfect() {
        let gts = vec![DetectionSet::<f64>::new(0)];
        let dets = vec![DetectionSet::new(0)];
        let r = evaluate_map(&dets, &gts, 3);
        assert_eq!(r.ap50_95, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
    }

    /// Brute-force PR-integration oracle, written independently: explicit
    /// per-threshold greedy matching and direct 101-point sampling.
    fn oracle_ap50_95(dets: &[DetectionSet<f64>], gts: &[DetectionSet<f64>], classes: usize) -> f64 {
        let mut class_aps = Vec::new();
        for c in 0..classes {
            let n_gt: usize = gts
                .iter()
                .map(|g| g.boxes.iter().filter(|b| b.class_id == c).count())
                .sum();
            if n_gt == 0 {
                continue;
            }
            let mut t_aps = Vec::new();
            for ti in 0..10 {
                let thr = 0.5 + ti as f64 * 0.05;
                // gather and sort detections
                let mut all: Vec<(f64, usize, usize)> = Vec::new();
                for (im, d) in dets.iter().enumerate() {
                    for (di, b) in d.boxes.iter().enumerate() {
                        if b.class_id == c {
                            all.push((b.score, im, di));
                        }
                    }
                }
                all.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                });
                let mut used: std::collections::HashSet<(usize, usize)> = Default::default();
                let mut curve: Vec<(f64, f64)> = Vec::new();
                let (mut tp, mut fp) = (0.0, 0.0);
                for &(_, im, di) in &all {
                    let db = &dets[im].boxes[di];
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, gb) in gts[im].boxes.iter().enumerate() {
                        if gb.class_id != c || used.contains(&(im, gi)) {
                            continue;
                        }
                        let o = iou(db, gb);
                        if o >= thr && best.map_or(true, |(_, bo)| o > bo) {
                            best = Some((gi, o));
                        }
                    }
                    if let Some((gi, _)) = best {
                        used.insert((im, gi));
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                    curve.push((tp / n_gt as f64, tp / (tp + fp)));
                }
                // textbook interpolation: p(r) = max precision at recall >= r
                let mut ap = 0.0;
                for k in 0..=100 {
                    let r = k as f64 / 100.0;
                    let p = curve
                        .iter()
                        .filter(|&&(rc, _)| rc >= r)
                        .map(|&(_, pc)| pc)
                        .fold(0.0, f64::max);
                    ap += p;
                }
                t_aps.push(ap / 101.0);
            }
            class_aps.push(t_aps.iter().sum::<f64>() / t_aps.len() as f64);
        }
        if class_aps.is_empty() {
            return if dets.iter().any(|d| !d.is_empty()) { 0.0 } else { 1.0 };
        }
        class_aps.iter().sum::<f64>() / class_aps.len() as f64
    }

    #[test]
    fn crafted_scenario_matches_bruteforce_oracle() {
        // two classes, six detections across two images: one duplicate, one
        // misplaced, one wrong class, mixed scores
        let gts = vec![
            set(0, &[(10.0, 10.0, 8.0, 8.0, 0, 1.0), (30.0, 30.0, 10.0, 10.0, 1, 1.0)]),
            set(1, &[(20.0, 20.0, 12.0, 12.0, 0, 1.0)]),
        ];
        let dets = vec![
            set(
                0,
                &[
                    (10.5, 10.0, 8.0, 8.0, 0, 0.95),
                    (10.0, 10.5, 8.5, 8.0, 0, 0.85), // duplicate -> FP
                    (30.0, 30.0, 10.0, 10.0, 0, 0.80), // wrong class
                    (31.0, 30.0, 10.0, 9.0, 1, 0.75),
                ],
            ),
            set(
                1,
                &[
                    (45.0, 45.0, 12.0, 12.0, 0, 0.70), // far off -> FP
                    (20.0, 20.0, 11.0, 12.0, 0, 0.65),
                ],
            ),
        ];
        let got = evaluate_map(&dets, &gts, 2);
        let want = oracle_ap50_95(&dets, &gts, 2);
        assert!(
            (got.ap50_95 - want).abs() < 1e-12,
            "got {} oracle {want}",
            got.ap50_95
        );
    }

    #[test]
    fn adding_perfect_top_detection_never_decreases_ap() {
        let gts = vec![set(
            0,
            &[(10.0, 10.0, 8.0, 8.0, 0, 1.0), (40.0, 40.0, 8.0, 8.0, 0, 1.0)],
        )];
        let dets0 = vec![set(0, &[(11.0, 10.0, 8.0, 8.0, 0, 0.6)])];
        let base = evaluate_map(&dets0, &gts, 1).ap50_95;
        let dets1 = vec![set(
            0,
            &[(11.0, 10.0, 8.0, 8.0, 0, 0.6), (40.0, 40.0, 8.0, 8.0, 0, 0.99)],
        )];
        let more = evaluate_map(&dets1, &gts, 1).ap50_95;
        assert!(more >= base - 1e-12, "{more} < {base}");
    }

    #[test]
    fn image_order_permutation_is_invariant() {
        let gts = vec![
            set(0, &[(10.0, 10.0, 8.0, 8.0, 0, 1.0)]),
            set(1, &[(30.0, 30.0, 10.0, 10.0, 1, 1.0)]),
        ];
        let dets = vec![
            set(0, &[(10.0, 11.0, 8.0, 8.0, 0, 0.9)]),
            set(1, &[(30.0, 29.0, 10.0, 10.0, 1, 0.8)]),
        ];
        let a = evaluate_map(&dets, &gts, 2);
        let dets_r: Vec<_> = dets.iter().rev().cloned().collect();
        let gts_r: Vec<_> = gts.iter().rev().cloned().collect();
        let b = evaluate_map(&dets_r, &gts_r, 2);
        assert_eq!(a.ap50_95, b.ap50_95);
        assert_eq!(a.precision, b.precision);
        assert_eq!(a.recall, b.recall);
    }
}
