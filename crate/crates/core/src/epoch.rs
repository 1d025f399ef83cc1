//! Epoch-corresponding adaptation: per-epoch, per-class dual thresholds
//! estimated from ranked teacher score lists scaled by the labeled/unlabeled
//! ratio, plus the adversarial domain loss used during burn-in.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::sigmoid;
use crate::error::{Error, Result};
use crate::pseudo::PseudoLabel;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

/// Three-way cell categorization by the dual thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    Background,
    Unreliable,
    Reliable,
}

/// Shared band logic: background wins at `p <= tau1`, reliable at
/// `p >= tau2`, everything between is unreliable. Equality resolves to
/// background first, which keeps the three branches an exact partition even when
/// `tau1 == tau2`.
#[inline]
pub fn categorize_score<T: Scalar>(p: T, tau1: T, tau2: T) -> Category {
    if p <= tau1 {
        Category::Background
    } else if p >= tau2 {
        Category::Reliable
    } else {
        Category::Unreliable
    }
}

/// Per-epoch accumulation of teacher score lists and presented GT counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats<T> {
    pub epoch: usize,
    pub num_classes: usize,
    /// Per class, the pseudo-label scores observed this epoch; descending
    /// once sealed.
    score_lists: Vec<Vec<T>>,
    /// Total scores offered per class (reservoir bookkeeping).
    seen: Vec<u64>,
    /// Per class, GT annotations actually presented to the labeled branch.
    pub gt_counts: Vec<u64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    sealed: bool,
    reservoir_cap: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> EpochStats<T> {
    pub fn new(
        epoch: usize,
        num_classes: usize,
        n_labeled: usize,
        n_unlabeled: usize,
        reservoir_cap: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_labeled == 0 || n_unlabeled == 0 {
            return Err(Error::config("labeled and unlabeled counts must be >= 1"));
        }
        if num_classes == 0 || reservoir_cap == 0 {
            return Err(Error::config("num_classes and reservoir_cap must be positive"));
        }
        Ok(Self {
            epoch,
            num_classes,
            score_lists: vec![Vec::new(); num_classes],
            seen: vec![0; num_classes],
            gt_counts: vec![0; num_classes],
            n_labeled,
            n_unlabeled,
            sealed: false,
            reservoir_cap,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15)),
        })
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn score_list(&self, class: usize) -> &[T] {
        &self.score_lists[class]
    }

    /// Appends each label's score to its argmax-class list (bounded by
    /// reservoir sampling once the cap is reached).
    pub fn record_scores(&mut self, labels: &[PseudoLabel<T>]) -> Result<()> {
        if self.sealed {
            return Err(Error::state("cannot record scores into sealed epoch stats"));
        }
        for l in labels {
            let c = l.argmax_class();
            self.seen[c] += 1;
            let list = &mut self.score_lists[c];
            if list.len() < self.reservoir_cap {
                list.push(l.score());
            } else {
                let j = self.rng.gen_range(0..self.seen[c]);
                if (j as usize) < self.reservoir_cap {
                    list[j as usize] = l.score();
                }
            }
        }
        Ok(())
    }

    /// Adds the per-class count of GT annotations fed to the labeled branch
    /// (post-mosaic); additive across batches.
    pub fn update_gt_counts(&mut self, presented: &[u64]) -> Result<()> {
        if self.sealed {
            return Err(Error::state("cannot update counts of sealed epoch stats"));
        }
        if presented.len() != self.num_classes {
            return Err(Error::config("per-class count length mismatch"));
        }
        for (acc, &c) in self.gt_counts.iter_mut().zip(presented) {
            *acc += c;
        }
        Ok(())
    }

    /// Sorts the score lists descending and freezes the stats.
    pub fn seal(&mut self) {
        for list in &mut self.score_lists {
            list.sort_by(|a, b| b.partial_cmp(a).expect("scores are not NaN"));
        }
        self.sealed = true;
    }
}

/// Per-class (tau1, tau2) with `tau1 <= tau2`, recomputed once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule<T> {
    pub epoch: usize,
    pub per_class: Vec<(T, T)>,
    /// Reliable ratio in percent.
    pub alpha: f64,
}

impl<T: Scalar> ThresholdSchedule<T> {
    /// Conservative schedule used before any score statistics exist; the
    /// default (0, 1) promotes nothing to reliable and treats only
    /// unassigned cells as background.
    pub fn fallback(epoch: usize, num_classes: usize, alpha: f64) -> Self {
        Self::fallback_with(epoch, num_classes, alpha, T::zero(), T::one())
    }

    pub fn fallback_with(epoch: usize, num_classes: usize, alpha: f64, tau1: T, tau2: T) -> Self {
        Self { epoch, per_class: vec![(tau1, tau2); num_classes], alpha }
    }

    pub fn tau1(&self) -> Vec<T> {
        self.per_class.iter().map(|&(a, _)| a).collect()
    }

    pub fn tau2(&self) -> Vec<T> {
        self.per_class.iter().map(|&(_, b)| b).collect()
    }

    /// Tabular dump: one row per class with the epoch, thresholds, and the
    /// score-list length backing them.
    pub fn table(&self, list_sizes: &[usize]) -> String {
        let mut out = String::from("epoch\tclass\ttau1\ttau2\tscores\n");
        for (c, &(t1, t2)) in self.per_class.iter().enumerate() {
            let n = list_sizes.get(c).copied().unwrap_or(0);
            out.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\t{}\n", self.epoch, c, t1, t2, n));
        }
        out
    }
}

/// Rounds half away from zero (0.5 -> 1).
fn round_half_away(x: f64) -> i64 {
    if x >= 0.0 {
        (x + 0.5).floor() as i64
    } else {
        (x - 0.5).ceil() as i64
    }
}

/// Threshold estimation from sealed stats: with the descending list `P_c`,
/// `tau1 = P_c[r1]` at rank `r1 = round(n_c * N_u / N_l)` and
/// `tau2 = P_c[r2]` at rank `r2 = round(alpha% * r1)`, both 1-based and
/// clamped to the list; an empty list falls back to (0, 1).
pub fn compute_thresholds<T: Scalar>(
    stats: &EpochStats<T>,
    alpha: f64,
) -> Result<ThresholdSchedule<T>> {
    if !stats.is_sealed() {
        return Err(Error::state("epoch stats must be sealed before computing thresholds"));
    }
    if !(0.0..=100.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must be in [0,100], got {alpha}")));
    }
    let ratio = stats.n_unlabeled as f64 / stats.n_labeled as f64;
    let per_class = (0..stats.num_classes)
        .map(|c| {
            let list = stats.score_list(c);
            if list.is_empty() {
                return (T::zero(), T::one());
            }
            let len = list.len() as i64;
            let r1 = round_half_away(stats.gt_counts[c] as f64 * ratio);
            let r2 = round_half_away(alpha / 100.0 * r1 as f64);
            let r1 = r1.clamp(1, len);
            let r2 = r2.clamp(1, len);
            (list[(r1 - 1) as usize], list[(r2 - 1) as usize])
        })
        .collect();
    Ok(ThresholdSchedule { epoch: stats.epoch, per_class, alpha })
}

// ---------------------------------------------------------------------------
// Domain adaptation
// ---------------------------------------------------------------------------

/// Domain-classifier output for one image: per-location probability that the
/// features came from unlabeled data, plus the domain flag (0 labeled,
/// 1 unlabeled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPrediction<T> {
    pub probs: Array2<T>,
    pub domain: u8,
}

impl<T: Scalar> DomainPrediction<T> {
    /// Applies a stable sigmoid and keeps probabilities strictly inside
    /// (0, 1) so the log terms stay finite.
    pub fn from_logits(logits: &ArrayD<T>, unlabeled: bool) -> Result<Self> {
        let s = logits.shape();
        let (h, w) = match s {
            [1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("domain logits must be [1,H,W] or [H,W], got {s:?}"))),
        };
        let eps = T::of(1e-7);
        let flat: Vec<T> = logits
            .iter()
            .map(|&z| sigmoid(z).max(eps).min(T::one() - eps))
            .collect();
        Ok(Self {
            probs: Array2::from_shape_vec((h, w), flat).expect("checked shape"),
            domain: if unlabeled { 1 } else { 0 },
        })
    }
}

/// Binary cross-entropy of the domain classifier, averaged over locations:
/// `-mean[D log p + (1-D) log(1-p)]`.
pub fn domain_loss<T: Scalar>(dp: &DomainPrediction<T>) -> T {
    let d = T::of_usize(dp.domain as usize);
    let n = T::of_usize(dp.probs.len());
    let mut sum = T::zero();
    for &p in &dp.probs {
        sum = sum - (d * p.ln() + (T::one() - d) * (T::one() - p).ln());
    }
    sum / n
}

/// Domain BCE as a graph node over raw logits (stable in the logit domain);
/// gradient is `(sigmoid(z) - D) / N`.
pub fn domain_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    unlabeled: bool,
) -> NodeId {
    let d = if unlabeled { T::one() } else { T::zero() };
    let vals = g.value(logits);
    let n = T::of_usize(vals.len());
    let mut sum = T::zero();
    for &z in vals.iter() {
        sum = sum + (z.max(T::zero()) - z * d + (T::one() + (-z.abs()).exp()).ln());
    }
    let value = sum / n;
    let parents = vec![logits.0];
    let backward = if g.grad_enabled() {
        Some(Box::new(move |gout: &ArrayD<T>, pv: &[&ArrayD<T>], _: &ArrayD<T>| {
            let s = *gout.iter().next().unwrap();
            vec![pv[0].mapv(|z| (sigmoid(z) - d) / n * s)]
        }) as Box<_>)
    } else {
        None
    };
    g.push(ndarray::arr0(value).into_dyn(), parents, backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn label(score: f64, class: usize, classes: usize) -> PseudoLabel<f64> {
        // obj_prob * max class prob == score by construction
        let mut dist = vec![0.0; classes];
        let maxp = if classes == 1 { 1.0 } else { 0.8 };
        dist[class] = maxp;
        if classes > 1 {
            let rest = (1.0 - maxp) / (classes as f64 - 1.0);
            for (i, d) in dist.iter_mut().enumerate() {
                if i != class {
                    *d = rest;
                }
            }
        }
        PseudoLabel::new(
            crate::geometry::BBox::new(10.0, 10.0, 5.0, 5.0, class, score).unwrap(),
            dist,
            score / maxp,
        )
        .unwrap()
    }

    fn stats_with(scores: &[(usize, f64)], gt: &[u64], nl: usize, nu: usize) -> EpochStats<f64> {
        let classes = gt.len();
        let mut st = EpochStats::new(0, classes, nl, nu, 100_000, 7).unwrap();
        let labels: Vec<_> = scores.iter().map(|&(c, s)| label(s, c, classes)).collect();
        st.record_scores(&labels).unwrap();
        st.update_gt_counts(gt).unwrap();
        st.seal();
        st
    }

    #[test]
    fn record_scores_accumulates_into_argmax_class_lists() {
        let mut st = EpochStats::<f64>::new(0, 3, 10, 100, 100_000, 1).unwrap();
        assert!(st.score_list(2).is_empty());
        st.record_scores(&[label(0.8, 2, 3)]).unwrap();
        assert_eq!(st.score_list(2), &[0.8]);
        assert!(st.score_list(0).is_empty());
        st.record_scores(&[]).unwrap();
        assert_eq!(st.score_list(2), &[0.8]);
    }

    #[test]
    fn record_scores_matches_multiset_accumulation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut st = EpochStats::<f64>::new(0, 4, 10, 100, 100_000, 1).unwrap();
        let mut expect: Vec<Vec<f64>> = vec![Vec::new(); 4];
        let labels: Vec<_> = (0..1000)
            .map(|_| {
                let c = rng.gen_range(0..4usize);
                let s = rng.gen_range(0.05..0.79);
                expect[c].push(s);
                label(s, c, 4)
            })
            .collect();
        st.record_scores(&labels).unwrap();
        for c in 0..4 {
            let mut got = st.score_list(c).to_vec();
            let mut want = expect[c].clone();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn sealed_stats_reject_mutation() {
        let mut st = stats_with(&[(0, 0.5)], &[1], 10, 100);
        assert!(st.record_scores(&[label(0.4, 0, 1)]).is_err());
        assert!(st.update_gt_counts(&[1]).is_err());
    }

    #[test]
    fn thresholds_manual_rank_lookup() {
        // P = [0.9, 0.8, 0.7, 0.6, 0.5] descending, n_c * Nu/Nl = 4, alpha 50:
        // r1 = 4 -> tau1 = 0.6; r2 = round(2) = 2 -> tau2 = 0.8.
        let scores: Vec<(usize, f64)> =
            [0.7, 0.9, 0.5, 0.8, 0.6].iter().map(|&s| (0usize, s)).collect();
        let st = stats_with(&scores, &[2], 10, 20); // 2 * 20/10 = 4
        let sched = compute_thresholds(&st, 50.0).unwrap();
        assert_eq!(sched.per_class[0], (0.6, 0.8));
    }

    #[test]
    fn thresholds_empty_list_falls_back() {
        let st = stats_with(&[], &[5], 10, 100);
        let sched = compute_thresholds(&st, 50.0).unwrap();
        assert_eq!(sched.per_class[0], (0.0, 1.0));
    }

    #[test]
    fn thresholds_rank_overflow_clamps_to_last() {
        let st = stats_with(&[(0, 0.9), (0, 0.4)], &[100], 10, 100);
        let sched = compute_thresholds(&st, 50.0).unwrap();
        // r1 = 1000 -> clamp 2 -> 0.4; r2 = round(500) -> clamp 2 -> 0.4
        assert_eq!(sched.per_class[0], (0.4, 0.4));
    }

    #[test]
    fn thresholds_require_sealed_stats() {
        let mut st = EpochStats::<f64>::new(0, 1, 10, 100, 100_000, 1).unwrap();
        st.record_scores(&[label(0.5, 0, 1)]).unwrap();
        assert!(matches!(compute_thresholds(&st, 50.0), Err(Error::State(_))));
    }

    #[test]
    fn thresholds_order_invariant_and_tau2_ge_tau1() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = rng.gen_range(0..40usize);
            let mut scores: Vec<(usize, f64)> =
                (0..n).map(|_| (0usize, rng.gen_range(0.0..1.0))).collect();
            let gt = vec![rng.gen_range(0..30u64)];
            let nl = rng.gen_range(1..50usize);
            let nu = rng.gen_range(1..500usize);
            let a = stats_with(&scores, &gt, nl, nu);
            scores.shuffle(&mut rng);
            let b = stats_with(&scores, &gt, nl, nu);
            let sa = compute_thresholds(&a, 50.0).unwrap();
            let sb = compute_thresholds(&b, 50.0).unwrap();
            assert_eq!(sa.per_class, sb.per_class, "trial {trial}");
            let (t1, t2) = sa.per_class[0];
            assert!(t2 >= t1);
        }
    }

    #[test]
    fn domain_loss_half_probability_is_ln2() {
        let dp = DomainPrediction { probs: Array2::from_elem((4, 4), 0.5), domain: 0 };
        assert!((domain_loss(&dp) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn domain_loss_perfect_classifier_tends_to_zero() {
        let logits = ArrayD::from_elem(IxDyn(&[1, 3, 3]), -30.0);
        let dp = DomainPrediction::from_logits(&logits, false).unwrap();
        assert!(domain_loss(&dp) < 1e-6);
        assert!(dp.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn domain_loss_matches_scalar_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 5, 7]), |_| rng.gen_range(-4.0..4.0));
        for unlabeled in [false, true] {
            let dp = DomainPrediction::from_logits(&logits, unlabeled).unwrap();
            let d = if unlabeled { 1.0 } else { 0.0 };
            let mut sum = 0.0;
            for &z in logits.iter() {
                let p: f64 = 1.0 / (1.0 + f64::exp(-z));
                sum -= d * p.ln() + (1.0 - d) * (1.0 - p).ln();
            }
            let want = sum / 35.0;
            assert!((domain_loss(&dp) - want).abs() < 1e-9);
            // graph node agrees and its gradient matches finite differences
            let mut g = Graph::new();
            let li = g.leaf(logits.clone());
            let ln = domain_loss_node(&mut g, li, unlabeled);
            assert!((g.scalar(ln) - want).abs() < 1e-9);
            let grads = g.backward(ln);
            let an = grads.get(li).unwrap().clone();
            let h = 1e-6;
            let probe = [0usize, 17, 34];
            for &i in &probe {
                let mut plus = logits.clone();
                plus.as_slice_mut().unwrap()[i] += h;
                let mut minus = logits.clone();
                minus.as_slice_mut().unwrap()[i] -= h;
                let f = |l: &ArrayD<f64>| {
                    let mut g = Graph::<f64>::inference();
                    let li = g.leaf(l.clone());
                    let n = domain_loss_node(&mut g, li, unlabeled);
                    g.scalar(n)
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = an.as_slice().unwrap()[i];
                assert!((a - fd).abs() < 1e-6, "elem {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn grl_composite_gradient_is_negated_and_matches_fd() {
        // domain head = 1x1 conv equivalent: weighted sum of features; loss
        // through GRL must give exactly the negated no-GRL input gradient.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let feats = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen_range(-1.0..1.0));
        let w = ArrayD::from_shape_fn(IxDyn(&[1, 2, 1, 1]), |_| rng.gen_range(-1.0..1.0));
        let b = ArrayD::zeros(IxDyn(&[1]));

        let run = |use_grl: bool, feats: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
            let mut g = Graph::new();
            let f = g.leaf(feats.clone());
            let wi = g.leaf(w.clone());
            let bi = g.leaf(b.clone());
            let x = if use_grl { g.grl(f) } else { f };
            let logit = g.conv2d(x, wi, bi, 1, 0).unwrap();
            let loss = domain_loss_node(&mut g, logit, true);
            let v = g.scalar(loss);
            let grads = g.backward(loss);
            (v, grads.get(f).unwrap().clone())
        };

        let (v_grl, g_grl) = run(true, &feats);
        let (v_plain, g_plain) = run(false, &feats);
        assert_eq!(v_grl, v_plain);
        assert_eq!(g_grl, g_plain.mapv(|x| -x));

        // finite differences on the GRL path cannot see the reversal (it is
        // forward-identity), so check the analytic no-GRL gradient instead
        // and rely on the exact negation above.
        let h = 1e-6;
        for i in [0usize, 7, 13] {
            let mut plus = feats.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = feats.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let fd = (run(false, &plus).0 - run(false, &minus).0) / (2.0 * h);
            let a = g_plain.as_slice().unwrap()[i];
            assert!((a - fd).abs() <= 1e-3 * (1.0 + fd.abs()));
            let ag = g_grl.as_slice().unwrap()[i];
            assert!((ag + fd).abs() <= 1e-3 * (1.0 + fd.abs()));
        }
    }
}
