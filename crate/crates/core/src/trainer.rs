//! The training loop: burn-in with adversarial domain adaptation, then
//! mean-teacher SSOD with per-epoch threshold re-estimation, MixPL batch
//! composition, SGD-with-momentum updates, EMA teacher updates, epoch
//! metrics, and integrity-checked checkpoints.
//!
//! All randomness is derived functionally from `(seed, purpose, epoch,
//! step, index)`, so runs are reproducible and checkpoint resume at an
//! epoch boundary is bit-exact.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    count_classes, pseudo_mixup, pseudo_mosaic, strong_augment, weak_augment, AugParams,
    AugmentedSample, Sample,
};
use crate::config::{hex_string, Config};
use crate::data::{evaluate_map, Dataset, EvalResult, SplitManifest};
use crate::detector::{
    decode_cells, AnchorConfig, DetectorArch, DetectorParams,
};
use crate::epoch::{compute_thresholds, domain_loss_node, EpochStats, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox, DetectionSet};
use crate::loss::{
    build_supervised_targets, sup_loss_node, unsup_loss_node, LossBreakdown, ObjLossOpts,
    SupLossWeights, UnsupParts,
};
use crate::multiscale::ScaleSpec;
use crate::pseudo::{generate_pseudo_labels, PseudoLabel};
use crate::scalar::Scalar;
use crate::tensor::Graph;

/// Training phases; burn-in strictly precedes SSOD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Burnin,
    Ssod,
}

/// One epoch's logged metrics (the JSON-lines record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: String,
    pub l_s: f64,
    pub l_u_cls: f64,
    pub l_u_reg: f64,
    pub l_u_obj: f64,
    pub l_da: f64,
    pub ap50: f64,
    pub ap50_95: f64,
    pub p: f64,
    pub r: f64,
}

/// Everything that must survive a checkpoint round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState<T> {
    pub student: DetectorParams<T>,
    pub teacher: Option<DetectorParams<T>>,
    pub momentum_buf: Vec<ArrayD<T>>,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    /// Stats accumulated during the previous epoch (sealed at its end);
    /// they feed the next epoch's thresholds.
    pub stats: EpochStats<T>,
    pub schedule: Option<ThresholdSchedule<T>>,
    pub metrics: Vec<MetricsRecord>,
    pub seed: u64,
    pub config_hash: String,
}

/// An unlabeled training sample mid-pipeline: pixels plus the pseudo labels
/// that survived augmentation.
#[derive(Debug, Clone)]
struct UnsupSample<T> {
    image: Array3<T>,
    labels: Vec<PseudoLabel<T>>,
}

type MetaMap<T> = HashMap<(usize, u64), (Vec<T>, T)>;

fn meta_key<T: Scalar>(b: &BBox<T>) -> (usize, u64) {
    (b.class_id, b.score.as_f64().to_bits())
}

fn meta_of<T: Scalar>(labels: &[PseudoLabel<T>]) -> MetaMap<T> {
    labels
        .iter()
        .map(|l| (meta_key(&l.bbox), (l.class_dist.clone(), l.obj_prob)))
        .collect()
}

/// Rebuilds pseudo labels from transformed boxes via the (class, score)
/// identity; geometric transforms never touch scores, so the lookup is
/// stable across the augmentation pipeline.
fn labels_from_boxes<T: Scalar>(boxes: &[BBox<T>], meta: &MetaMap<T>) -> Vec<PseudoLabel<T>> {
    boxes
        .iter()
        .map(|b| {
            if let Some((dist, obj)) = meta.get(&meta_key(b)) {
                PseudoLabel { bbox: *b, class_dist: dist.clone(), obj_prob: *obj }
            } else {
                // untracked box (should not happen): degenerate one-hot label
                let mut dist = vec![T::zero(); b.class_id + 1];
                dist[b.class_id] = T::one();
                PseudoLabel { bbox: *b, class_dist: dist, obj_prob: b.score }
            }
        })
        .collect()
}

// functional rng stream tags
const STREAM_SAMPLE_LAB: u64 = 1;
const STREAM_SAMPLE_UNL: u64 = 2;
const STREAM_AUG_LAB: u64 = 3;
const STREAM_AUG_UNL: u64 = 4;
const STREAM_AUG_STRONG: u64 = 5;
const STREAM_MIXPL: u64 = 6;
const STREAM_RESERVOIR: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-purpose RNG stream.
pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("SSODLAB_NUM_WORKERS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            builder = builder.num_threads(n.max(1));
        }
        builder.build().expect("worker pool")
    })
}

/// `teacher <- m * teacher + (1 - m) * student`, element-wise, computed as
/// `t + (1 - m) * (s - t)` so identical parameter sets are an exact fixed
/// point.
pub fn ema_update<T: Scalar>(
    teacher: &mut DetectorParams<T>,
    student: &DetectorParams<T>,
    m: T,
) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(Error::state("EMA requires structurally identical parameter sets"));
    }
    let one_minus = T::one() - m;
    for ((_, t), (_, s)) in teacher.entries.iter_mut().zip(&student.entries) {
        t.zip_mut_with(s, |tv, &sv| *tv = *tv + one_minus * (sv - *tv));
    }
    Ok(())
}

pub struct Trainer<T: Scalar> {
    pub cfg: Config,
    pub arch: DetectorArch<T>,
    pub train_ds: Dataset<T>,
    pub split: SplitManifest,
    pub state: TrainerState<T>,
    labeled_idx: Vec<usize>,
    unlabeled_idx: Vec<usize>,
    val_images: Vec<Array3<T>>,
    val_gts: Vec<DetectionSet<T>>,
    aug: AugParams,
    mix_cache: Vec<UnsupSample<T>>,
    out_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        cfg: Config,
        train_ds: Dataset<T>,
        val_ds: Option<Dataset<T>>,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let val_frac = if val_ds.is_some() { 0.0 } else { cfg.data.val_frac };
        let split = crate::data::make_split(&train_ds, cfg.data.labeled_pct, cfg.data.fold_seed, val_frac)?;
        Self::new_with_split(cfg, train_ds, val_ds, out_dir, split)
    }

    /// Trainer with an explicit id partition (e.g., a by-domain split).
    pub fn new_with_split(
        cfg: Config,
        train_ds: Dataset<T>,
        val_ds: Option<Dataset<T>>,
        out_dir: Option<PathBuf>,
        split: SplitManifest,
    ) -> Result<Self> {
        let arch = arch_from_config(&cfg)?;
        let seed = cfg.train.seed;
        let student = arch.init_params(seed);
        let momentum_buf = student.entries.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        let labeled_idx: Vec<usize> =
            split.labeled.iter().map(|id| train_ds.index_of(*id).expect("id in dataset")).collect();
        let unlabeled_idx: Vec<usize> =
            split.unlabeled.iter().map(|id| train_ds.index_of(*id).expect("id in dataset")).collect();
        if labeled_idx.is_empty() {
            return Err(Error::config("labeled split is empty"));
        }
        if unlabeled_idx.is_empty() && cfg.train.effective_burnin() < cfg.train.epochs {
            return Err(Error::config(
                "SSOD epochs are scheduled but the unlabeled split is empty",
            ));
        }
        let (val_images, val_gts) = match val_ds {
            Some(ds) => collect_val(&ds, None),
            None => collect_val(&train_ds, Some(&split.validation)),
        };
        let stats = EpochStats::new(
            0,
            cfg.model.num_classes,
            labeled_idx.len(),
            unlabeled_idx.len().max(1),
            cfg.epoch_corresponding.reservoir_cap,
            splitmix64(seed ^ STREAM_RESERVOIR),
        )?;
        let config_hash = cfg.hash();
        Ok(Self {
            arch,
            train_ds,
            split,
            state: TrainerState {
                student,
                teacher: None,
                momentum_buf,
                epoch: 0,
                step: 0,
                phase: Phase::Burnin,
                stats,
                schedule: None,
                metrics: Vec::new(),
                seed,
                config_hash,
            },
            labeled_idx,
            unlabeled_idx,
            val_images,
            val_gts,
            aug: cfg.aug.params(),
            mix_cache: Vec::new(),
            out_dir,
            cfg,
        })
    }

    /// Rebuilds a trainer around a checkpointed state; refuses a config whose
    /// hash differs from the one the state was trained under.
    pub fn resume(
        cfg: Config,
        train_ds: Dataset<T>,
        val_ds: Option<Dataset<T>>,
        out_dir: Option<PathBuf>,
        state: TrainerState<T>,
    ) -> Result<Self> {
        if state.config_hash != cfg.hash() {
            return Err(Error::config(format!(
                "checkpoint was trained under config {} but the current config hashes to {}; refusing to resume",
                state.config_hash,
                cfg.hash()
            )));
        }
        let mut t = Self::new(cfg, train_ds, val_ds, out_dir)?;
        t.state = state;
        Ok(t)
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled_idx.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled_idx.len()
    }

    fn image_size(&self) -> usize {
        self.cfg.model.image_size
    }

    fn steps_for(&self, phase: Phase) -> usize {
        match phase {
            Phase::Burnin => self.cfg.train.steps_per_epoch_burnin.unwrap_or_else(|| {
                self.labeled_idx.len().div_ceil(self.cfg.train.batch_labeled).max(1)
            }),
            Phase::Ssod => self.cfg.train.steps_per_epoch_ssod.unwrap_or_else(|| {
                self.unlabeled_idx.len().div_ceil(self.cfg.train.batch_unlabeled).max(1)
            }),
        }
    }

    // -- batch construction --------------------------------------------------

    fn draw_groups(&self, pool_idx: &[usize], stream: u64, epoch: usize, step: usize, batch: usize) -> Vec<Vec<Sample<T>>> {
        let mut rng = rng_for(self.state.seed, &[stream, epoch as u64, step as u64]);
        (0..batch / 4)
            .map(|_| {
                (0..4)
                    .map(|_| self.train_ds.sample(pool_idx[rng.gen_range(0..pool_idx.len())]))
                    .collect()
            })
            .collect()
    }

    fn make_labeled_samples(&self, epoch: usize, step: usize) -> Result<Vec<AugmentedSample<T>>> {
        let groups = self.draw_groups(
            &self.labeled_idx,
            STREAM_SAMPLE_LAB,
            epoch,
            step,
            self.cfg.train.batch_labeled,
        );
        groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let seed = splitmix64(
                    self.state.seed
                        ^ splitmix64(STREAM_AUG_LAB ^ (epoch as u64) << 24 ^ (step as u64) << 4 ^ gi as u64),
                );
                weak_augment(g, self.image_size(), seed)
            })
            .collect()
    }

    fn make_weak_unlabeled(&self, epoch: usize, step: usize) -> Result<Vec<AugmentedSample<T>>> {
        let mut groups = self.draw_groups(
            &self.unlabeled_idx,
            STREAM_SAMPLE_UNL,
            epoch,
            step,
            self.cfg.train.batch_unlabeled,
        );
        // the unlabeled branch never sees ground truth
        for g in &mut groups {
            for s in g {
                s.boxes.clear();
            }
        }
        groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let seed = splitmix64(
                    self.state.seed
                        ^ splitmix64(STREAM_AUG_UNL ^ (epoch as u64) << 24 ^ (step as u64) << 4 ^ gi as u64),
                );
                weak_augment(g, self.image_size(), seed)
            })
            .collect()
    }

    // -- per-sample losses ----------------------------------------------------

    /// Supervised (and optional domain) contribution of one labeled sample.
    /// Returned gradients are pre-scaled by the batch weights.
    fn labeled_backward(
        &self,
        sample: &AugmentedSample<T>,
        sup_weight: T,
        domain: Option<(T, T)>, // (gradient multiplier, weight)
    ) -> Result<(T, T, Vec<Option<ArrayD<T>>>)> {
        let mut g = Graph::new();
        let fwd = self.arch.forward(
            &mut g,
            &self.state.student,
            &sample.image,
            domain.map(|(m, _)| m),
        )?;
        let gt = DetectionSet { image_id: sample.image_id, boxes: sample.boxes.clone() };
        let targets = build_supervised_targets(&gt, &self.arch.cfg, self.image_size());
        let weights = SupLossWeights {
            cls: T::of(self.cfg.loss.w_cls),
            reg: T::of(self.cfg.loss.w_reg),
            obj_pos_weight: T::of(self.cfg.loss.obj_pos_weight),
        };
        let l_s = sup_loss_node(&mut g, &fwd.heads, &self.arch, &targets, weights)?;
        let mut terms = vec![(l_s, sup_weight)];
        let mut dom_value = T::zero();
        if let Some((_, w)) = domain {
            let dom = domain_loss_node(&mut g, fwd.domain_logits.expect("domain head"), false);
            dom_value = g.scalar(dom);
            terms.push((dom, w));
        }
        let total = g.weighted_sum(&terms);
        let mut grads = g.backward(total);
        let out = fwd.bound.ids.iter().map(|&id| grads.take(id)).collect();
        Ok((g.scalar(l_s), dom_value, out))
    }

    /// Domain-only contribution of one unlabeled sample during burn-in.
    fn domain_backward(
        &self,
        image: &Array3<T>,
        grl_mult: T,
        weight: T,
    ) -> Result<(T, Vec<Option<ArrayD<T>>>)> {
        let mut g = Graph::new();
        let fwd = self.arch.forward(&mut g, &self.state.student, image, Some(grl_mult))?;
        let dom = domain_loss_node(&mut g, fwd.domain_logits.expect("domain head"), true);
        let total = g.weighted_sum(&[(dom, weight)]);
        let mut grads = g.backward(total);
        let out = fwd.bound.ids.iter().map(|&id| grads.take(id)).collect();
        Ok((g.scalar(dom), out))
    }

    /// Unsupervised contribution of one pseudo-labeled sample.
    fn unsup_backward(
        &self,
        sample: &UnsupSample<T>,
        schedule: &ThresholdSchedule<T>,
        weight: T,
    ) -> Result<(UnsupParts<T>, Vec<Option<ArrayD<T>>>)> {
        let mut g = Graph::new();
        let fwd = self.arch.forward(&mut g, &self.state.student, &sample.image, None)?;
        let pt = crate::pseudo::assign_pseudo_targets(&sample.labels, &self.arch.cfg, self.image_size());
        let opts = ObjLossOpts {
            unreliable_branch: self.cfg.loss.unreliable_branch,
            obj_gate: T::of(self.cfg.loss.obj_gate),
        };
        let (l_u, parts) = unsup_loss_node(
            &mut g,
            &fwd.heads,
            &self.arch,
            &pt,
            &schedule.tau1(),
            &schedule.tau2(),
            opts,
        )?;
        let total = g.weighted_sum(&[(l_u, weight)]);
        let mut grads = g.backward(total);
        let out = fwd.bound.ids.iter().map(|&id| grads.take(id)).collect();
        Ok((parts, out))
    }

    fn accumulate(total: &mut Vec<ArrayD<T>>, part: Vec<Option<ArrayD<T>>>) {
        for (acc, p) in total.iter_mut().zip(part) {
            if let Some(p) = p {
                *acc += &p;
            }
        }
    }

    fn zero_grads(&self) -> Vec<ArrayD<T>> {
        self.state
            .student
            .entries
            .iter()
            .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
            .collect()
    }

    fn sgd_step(&mut self, grads: Vec<ArrayD<T>>) {
        let lr = T::of(self.cfg.train.lr);
        let mu = T::of(self.cfg.train.momentum);
        for ((buf, g), (_, p)) in self
            .state
            .momentum_buf
            .iter_mut()
            .zip(grads)
            .zip(self.state.student.entries.iter_mut())
        {
            buf.zip_mut_with(&g, |b, &gv| *b = *b * mu + gv);
            p.zip_mut_with(buf, |pv, &bv| *pv = *pv - lr * bv);
        }
    }

    // -- steps ----------------------------------------------------------------

    fn burnin_step(&mut self, epoch: usize, step: usize, priming: bool) -> Result<LossBreakdown<f64>> {
        let lab = self.make_labeled_samples(epoch, step)?;
        for s in &lab {
            let counts = count_classes(&s.boxes, self.cfg.model.num_classes);
            self.state.stats.update_gt_counts(&counts)?;
        }
        let lambda_da = self.cfg.train.lambda_da;
        let with_domain = lambda_da > 0.0;
        let unl = if with_domain || priming {
            self.make_weak_unlabeled(epoch, step)?
        } else {
            Vec::new()
        };

        if priming {
            // prime next-epoch thresholds with proto-teacher (current
            // student) scores on the weak unlabeled batch
            let conf = T::of(self.cfg.pseudo.conf_floor);
            let nms = T::of(self.cfg.pseudo.nms_iou);
            let labels: Vec<Vec<PseudoLabel<T>>> = worker_pool().install(|| {
                unl.par_iter()
                    .map(|s| generate_pseudo_labels(&self.arch, &self.state.student, &s.image, conf, nms))
                    .collect::<Result<_>>()
            })?;
            for ls in &labels {
                self.state.stats.record_scores(ls)?;
            }
        }

        let n_lab = lab.len();
        let n_dom = if with_domain { n_lab + unl.len() } else { 0 };
        let sup_w = T::one() / T::of_usize(n_lab);
        let grl_mult = self.grl_multiplier(epoch);
        let dom_w = if with_domain {
            Some((grl_mult, T::of(lambda_da) / T::of_usize(n_dom)))
        } else {
            None
        };

        let lab_out: Vec<(T, T, Vec<Option<ArrayD<T>>>)> = worker_pool().install(|| {
            lab.par_iter()
                .map(|s| self.labeled_backward(s, sup_w, dom_w))
                .collect::<Result<_>>()
        })?;
        let unl_out: Vec<(T, Vec<Option<ArrayD<T>>>)> = if with_domain {
            worker_pool().install(|| {
                unl.par_iter()
                    .map(|s| {
                        self.domain_backward(
                            &s.image,
                            grl_mult,
                            T::of(lambda_da) / T::of_usize(n_dom),
                        )
                    })
                    .collect::<Result<_>>()
            })?
        } else {
            Vec::new()
        };

        let mut grads = self.zero_grads();
        let mut l_s_sum = T::zero();
        let mut l_da_sum = T::zero();
        for (l_s, dom, part) in lab_out {
            l_s_sum = l_s_sum + l_s;
            l_da_sum = l_da_sum + dom;
            Self::accumulate(&mut grads, part);
        }
        for (dom, part) in unl_out {
            l_da_sum = l_da_sum + dom;
            Self::accumulate(&mut grads, part);
        }
        self.sgd_step(grads);
        self.state.step += 1;

        let l_s = l_s_sum.as_f64() / n_lab as f64;
        let l_da = if with_domain { l_da_sum.as_f64() / n_dom as f64 } else { 0.0 };
        Ok(LossBreakdown {
            l_s,
            l_u_cls: 0.0,
            l_u_reg: 0.0,
            l_u_obj: 0.0,
            l_u: 0.0,
            l_da,
            lambda_u: 0.0,
            lambda_da,
            total: l_s + lambda_da * l_da,
        })
    }

    /// Gradient multiplier at the GRL boundary for this epoch: -1 reversal,
    /// optionally ramped from 0 over the burn-in (the standard adversarial
    /// warm-up), or +1 when reversal is disabled (the ablation control).
    fn grl_multiplier(&self, epoch: usize) -> T {
        if !self.cfg.domain.grl_enabled {
            return T::one();
        }
        if !self.cfg.domain.grl_ramp {
            return -T::one();
        }
        let burnin = self.cfg.train.effective_burnin().max(1);
        let p = (epoch as f64 + 1.0) / burnin as f64;
        let lambda = 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0;
        -T::of(lambda)
    }

    fn ssod_step(&mut self, epoch: usize, step: usize) -> Result<LossBreakdown<f64>> {
        let schedule = self
            .state
            .schedule
            .clone()
            .ok_or_else(|| Error::state("threshold schedule not sealed for this epoch"))?;
        let lambda_u = self.cfg.train.lambda_u;

        // labeled branch
        let lab = self.make_labeled_samples(epoch, step)?;
        for s in &lab {
            let counts = count_classes(&s.boxes, self.cfg.model.num_classes);
            self.state.stats.update_gt_counts(&counts)?;
        }

        // unlabeled branch: weak -> teacher labels -> strong -> MixPL
        let unl_weak = self.make_weak_unlabeled(epoch, step)?;
        let teacher = self
            .state
            .teacher
            .as_ref()
            .ok_or_else(|| Error::state("teacher missing in SSOD phase"))?;
        let conf = T::of(self.cfg.pseudo.conf_floor);
        let nms = T::of(self.cfg.pseudo.nms_iou);
        let labels_per: Vec<Vec<PseudoLabel<T>>> = worker_pool().install(|| {
            unl_weak
                .par_iter()
                .map(|s| generate_pseudo_labels(&self.arch, teacher, &s.image, conf, nms))
                .collect::<Result<_>>()
        })?;
        for ls in &labels_per {
            self.state.stats.record_scores(ls)?;
        }

        let mut unsup: Vec<UnsupSample<T>> = Vec::new();
        if lambda_u > 0.0 {
            for (gi, (weak, labels)) in unl_weak.iter().zip(&labels_per).enumerate() {
                let meta = meta_of(labels);
                let carrier = AugmentedSample {
                    image_id: weak.image_id,
                    image: weak.image.clone(),
                    boxes: labels.iter().map(|l| l.bbox).collect(),
                    record: vec![],
                };
                let seed = splitmix64(
                    self.state.seed
                        ^ splitmix64(
                            STREAM_AUG_STRONG ^ (epoch as u64) << 24 ^ (step as u64) << 4 ^ gi as u64,
                        ),
                );
                let strong = strong_augment(&carrier, &self.aug, seed)?;
                unsup.push(UnsupSample {
                    image: strong.image,
                    labels: labels_from_boxes(&strong.boxes, &meta),
                });
            }

            // MixPL over the strong samples and the rolling cache
            let originals = unsup.clone();
            let mut rng = rng_for(self.state.seed, &[STREAM_MIXPL, epoch as u64, step as u64]);
            if rng.gen_bool(self.aug.mixpl_mixup_prob) && !self.mix_cache.is_empty() {
                let ratio = T::of(self.aug.mixup_ratio);
                for u in &mut unsup {
                    let c = &self.mix_cache[rng.gen_range(0..self.mix_cache.len())];
                    let a = AugmentedSample {
                        image_id: 0,
                        image: u.image.clone(),
                        boxes: u.labels.iter().map(|l| l.bbox).collect(),
                        record: vec![],
                    };
                    let b = AugmentedSample {
                        image_id: 0,
                        image: c.image.clone(),
                        boxes: c.labels.iter().map(|l| l.bbox).collect(),
                        record: vec![],
                    };
                    let mut meta = meta_of(&u.labels);
                    meta.extend(meta_of(&c.labels));
                    let mixed = pseudo_mixup(&a, &b, ratio)?;
                    *u = UnsupSample {
                        image: mixed.image,
                        labels: labels_from_boxes(&mixed.boxes, &meta),
                    };
                }
            }
            if rng.gen_bool(self.aug.mixpl_mosaic_prob) && self.mix_cache.len() >= 4 {
                let picks: Vec<&UnsupSample<T>> = (0..4)
                    .map(|_| &self.mix_cache[rng.gen_range(0..self.mix_cache.len())])
                    .collect();
                let mut meta = MetaMap::new();
                let parts: Vec<AugmentedSample<T>> = picks
                    .iter()
                    .map(|p| {
                        meta.extend(meta_of(&p.labels));
                        AugmentedSample {
                            image_id: 0,
                            image: p.image.clone(),
                            boxes: p.labels.iter().map(|l| l.bbox).collect(),
                            record: vec![],
                        }
                    })
                    .collect();
                let mosaic_seed = splitmix64(self.state.seed ^ (epoch as u64) << 20 ^ step as u64);
                let m = pseudo_mosaic(&parts, self.image_size(), mosaic_seed)?;
                unsup.push(UnsupSample {
                    image: m.image,
                    labels: labels_from_boxes(&m.boxes, &meta),
                });
            }
            self.mix_cache.extend(originals);
            let keep = 8;
            if self.mix_cache.len() > keep {
                let drop = self.mix_cache.len() - keep;
                self.mix_cache.drain(..drop);
            }
        }

        // student updates
        let n_lab = lab.len();
        let sup_w = T::one() / T::of_usize(n_lab);
        let lab_out: Vec<(T, T, Vec<Option<ArrayD<T>>>)> = worker_pool().install(|| {
            lab.par_iter()
                .map(|s| self.labeled_backward(s, sup_w, None))
                .collect::<Result<_>>()
        })?;

        let n_unsup = unsup.len().max(1);
        let unsup_w = T::of(lambda_u) / T::of_usize(n_unsup);
        let unsup_out: Vec<(UnsupParts<T>, Vec<Option<ArrayD<T>>>)> = if lambda_u > 0.0 {
            worker_pool().install(|| {
                unsup
                    .par_iter()
                    .map(|u| self.unsup_backward(u, &schedule, unsup_w))
                    .collect::<Result<_>>()
            })?
        } else {
            Vec::new()
        };

        let mut grads = self.zero_grads();
        let mut l_s_sum = T::zero();
        for (l_s, _, part) in lab_out {
            l_s_sum = l_s_sum + l_s;
            Self::accumulate(&mut grads, part);
        }
        let mut parts_sum = UnsupParts::<T>::zero();
        for (parts, part) in unsup_out {
            parts_sum.cls = parts_sum.cls + parts.cls;
            parts_sum.reg = parts_sum.reg + parts.reg;
            parts_sum.obj = parts_sum.obj + parts.obj;
            Self::accumulate(&mut grads, part);
        }
        self.sgd_step(grads);

        // EMA teacher update
        let m = T::of(self.cfg.train.ema_momentum);
        let TrainerState { teacher, student, .. } = &mut self.state;
        ema_update(teacher.as_mut().expect("teacher exists in ssod"), student, m)?;
        self.state.step += 1;

        let l_s = l_s_sum.as_f64() / n_lab as f64;
        let scale = if lambda_u > 0.0 { 1.0 / n_unsup as f64 } else { 0.0 };
        let parts = UnsupParts {
            cls: parts_sum.cls.as_f64() * scale,
            reg: parts_sum.reg.as_f64() * scale,
            obj: parts_sum.obj.as_f64() * scale,
        };
        Ok(LossBreakdown::compose(l_s, parts, 0.0, lambda_u, 0.0))
    }

    // -- epochs -----------------------------------------------------------------

    fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.cfg.train.effective_burnin() {
            Phase::Burnin
        } else {
            Phase::Ssod
        }
    }

    /// Runs one epoch: threshold sealing, steps, evaluation, metrics, and
    /// artifact dumps. Returns the epoch's metrics record.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let epoch = self.state.epoch;
        let phase = self.phase_of(epoch);
        let burnin = self.cfg.train.effective_burnin();

        if phase == Phase::Ssod && self.state.teacher.is_none() {
            // burn-in -> ssod transition: the teacher starts as a copy
            self.state.teacher = Some(self.state.student.clone());
        }
        if phase == Phase::Ssod {
            let schedule = if self.state.stats.is_sealed() {
                compute_thresholds(&self.state.stats, self.cfg.epoch_corresponding.alpha)?
            } else {
                ThresholdSchedule::fallback_with(
                    epoch,
                    self.cfg.model.num_classes,
                    self.cfg.epoch_corresponding.alpha,
                    T::of(self.cfg.epoch_corresponding.fallback_tau1),
                    T::of(self.cfg.epoch_corresponding.fallback_tau2),
                )
            };
            self.state.schedule = Some(schedule);
        }
        self.state.phase = phase;

        // dump previous epoch's score lists before replacing the stats
        if self.cfg.train.dump_scores && self.state.stats.is_sealed() {
            self.dump_score_lists()?;
        }
        let fresh = EpochStats::new(
            epoch,
            self.cfg.model.num_classes,
            self.labeled_idx.len(),
            self.unlabeled_idx.len().max(1),
            self.cfg.epoch_corresponding.reservoir_cap,
            splitmix64(self.state.seed ^ STREAM_RESERVOIR ^ epoch as u64),
        )?;
        self.state.stats = fresh;
        self.mix_cache.clear();

        let steps = self.steps_for(phase);
        let priming = phase == Phase::Burnin
            && epoch + 1 == burnin
            && burnin < self.cfg.train.epochs
            && !self.unlabeled_idx.is_empty();
        let mut sums = [0.0f64; 6]; // l_s, cls, reg, obj, da, total
        for step in 0..steps {
            let bd = match phase {
                Phase::Burnin => self.burnin_step(epoch, step, priming)?,
                Phase::Ssod => self.ssod_step(epoch, step)?,
            };
            sums[0] += bd.l_s;
            sums[1] += bd.l_u_cls;
            sums[2] += bd.l_u_reg;
            sums[3] += bd.l_u_obj;
            sums[4] += bd.l_da;
            sums[5] += bd.total;
        }
        self.state.stats.seal();

        let due = (epoch + 1) % self.cfg.train.eval_every.max(1) == 0
            || epoch + 1 == self.cfg.train.epochs;
        let eval = if due {
            Some(self.evaluate()?)
        } else {
            None
        };
        let (ap50, ap50_95, p, r) = match (&eval, self.state.metrics.last()) {
            (Some(e), _) => (e.ap50, e.ap50_95, e.precision, e.recall),
            (None, Some(prev)) => (prev.ap50, prev.ap50_95, prev.p, prev.r),
            (None, None) => (0.0, 0.0, 0.0, 0.0),
        };
        let n = steps as f64;
        let record = MetricsRecord {
            epoch,
            phase: match phase {
                Phase::Burnin => "burnin".to_string(),
                Phase::Ssod => "ssod".to_string(),
            },
            l_s: sums[0] / n,
            l_u_cls: sums[1] / n,
            l_u_reg: sums[2] / n,
            l_u_obj: sums[3] / n,
            l_da: sums[4] / n,
            ap50,
            ap50_95,
            p,
            r,
        };
        self.state.metrics.push(record.clone());
        self.state.epoch += 1;

        self.write_epoch_artifacts(&record)?;
        Ok(record)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        while self.state.epoch < self.cfg.train.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn write_epoch_artifacts(&self, record: &MetricsRecord) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        if let Some(schedule) = &self.state.schedule {
            if self.state.phase == Phase::Ssod {
                let sizes: Vec<usize> = (0..self.cfg.model.num_classes)
                    .map(|c| self.state.stats.score_list(c).len())
                    .collect();
                std::fs::write(
                    dir.join(format!("thresholds_epoch_{:04}.txt", record.epoch)),
                    schedule.table(&sizes),
                )?;
            }
        }
        if record.epoch % self.cfg.train.checkpoint_every.max(1) == 0
            || self.state.epoch == self.cfg.train.epochs
        {
            self.checkpoint_save(&dir.join(format!("checkpoint_epoch_{:04}.json", record.epoch)))?;
            self.checkpoint_save(&dir.join("checkpoint_latest.json"))?;
        }
        Ok(())
    }

    fn dump_score_lists(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir.join("score_lists"))?;
        let lists: Vec<Vec<f64>> = (0..self.cfg.model.num_classes)
            .map(|c| self.state.stats.score_list(c).iter().map(|s| s.as_f64()).collect())
            .collect();
        let dump = serde_json::json!({
            "epoch": self.state.stats.epoch,
            "gt_counts": self.state.stats.gt_counts,
            "n_labeled": self.state.stats.n_labeled,
            "n_unlabeled": self.state.stats.n_unlabeled,
            "score_lists": lists,
        });
        std::fs::write(
            dir.join("score_lists").join(format!("epoch_{:04}.json", self.state.stats.epoch)),
            serde_json::to_string(&dump)?,
        )?;
        Ok(())
    }

    // -- inference / evaluation ---------------------------------------------

    /// Detections of one image under `params` (decode, class-wise NMS, top-k).
    pub fn detect(
        &self,
        params: &DetectorParams<T>,
        image: &Array3<T>,
        image_id: u64,
    ) -> Result<DetectionSet<T>> {
        let (_, preds) = self.arch.infer(params, image)?;
        let cells = decode_cells(&preds, T::of(self.cfg.eval.conf_floor))?;
        let boxes: Vec<BBox<T>> = cells.iter().map(|c| c.bbox).collect();
        let kept = nms_indices(&boxes, T::of(self.cfg.eval.nms_iou), T::of(self.cfg.eval.conf_floor))?;
        Ok(DetectionSet {
            image_id,
            boxes: kept
                .into_iter()
                .take(self.cfg.eval.max_dets)
                .map(|i| boxes[i])
                .collect(),
        })
    }

    /// Evaluates given parameters on the validation split.
    pub fn evaluate_params(&self, params: &DetectorParams<T>) -> Result<EvalResult> {
        let dets: Vec<DetectionSet<T>> = worker_pool().install(|| {
            self.val_images
                .par_iter()
                .zip(&self.val_gts)
                .map(|(img, gt)| self.detect(params, img, gt.image_id))
                .collect::<Result<_>>()
        })?;
        Ok(evaluate_map(&dets, &self.val_gts, self.cfg.model.num_classes))
    }

    /// Evaluates the current model (teacher when it exists, else student).
    pub fn evaluate(&self) -> Result<EvalResult> {
        match &self.state.teacher {
            Some(t) => self.evaluate_params(t),
            None => self.evaluate_params(&self.state.student),
        }
    }

    /// Domain-classifier accuracy over held-out (image, is_unlabeled) pairs,
    /// measured per feature location.
    pub fn domain_accuracy(
        &self,
        params: &DetectorParams<T>,
        samples: &[(Array3<T>, bool)],
    ) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (image, unlabeled) in samples {
            let mut g = Graph::inference();
            let fwd = self.arch.forward(&mut g, params, image, Some(-T::one()))?;
            let logits = g.value(fwd.domain_logits.expect("domain head"));
            for &z in logits.iter() {
                let predicted_unlabeled = z > T::zero();
                if predicted_unlabeled == *unlabeled {
                    correct += 1;
                }
                total += 1;
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    // -- checkpointing --------------------------------------------------------

    pub fn checkpoint_save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.state, &self.cfg, path)
    }
}

fn collect_val<T: Scalar>(
    ds: &Dataset<T>,
    ids: Option<&[u64]>,
) -> (Vec<Array3<T>>, Vec<DetectionSet<T>>) {
    let indices: Vec<usize> = match ids {
        Some(ids) => ids.iter().filter_map(|id| ds.index_of(*id)).collect(),
        None => (0..ds.len()).collect(),
    };
    let images = indices.iter().map(|&i| ds.images[i].clone()).collect();
    let gts = indices
        .iter()
        .map(|&i| DetectionSet { image_id: ds.ids[i], boxes: ds.boxes[i].clone() })
        .collect();
    (images, gts)
}

/// Builds the detector architecture described by a config.
pub fn arch_from_config<T: Scalar>(cfg: &Config) -> Result<DetectorArch<T>> {
    let anchors = AnchorConfig::with_default_anchors(cfg.model.strides.clone(), cfg.model.num_classes)?;
    DetectorArch::new(
        anchors,
        cfg.model.image_size,
        cfg.model.width,
        cfg.model.neck_width,
        ScaleSpec::new(cfg.multiscale.scales.clone(), cfg.model.image_size)?,
    )
}

const CHECKPOINT_MAGIC: &str = "ssodlab-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    config_toml: String,
    config_hash: String,
    payload: String,
    checksum: String,
}

/// Serializes the full state with a payload checksum and the resolved config.
pub fn save_checkpoint<T: Scalar>(
    state: &TrainerState<T>,
    cfg: &Config,
    path: &Path,
) -> Result<()> {
    let payload = serde_json::to_string(state)?;
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    let file = CheckpointFile {
        magic: CHECKPOINT_MAGIC.to_string(),
        config_toml: cfg.snapshot(),
        config_hash: cfg.hash(),
        payload,
        checksum: hex_string(&hasher.finalize()),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Loads a checkpoint, verifying the magic and the payload checksum.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Config, TrainerState<T>)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("unreadable checkpoint: {e}")))?;
    if file.magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity(format!("unexpected magic \"{}\"", file.magic)));
    }
    let mut hasher = Sha256::new();
    hasher.update(file.payload.as_bytes());
    if hex_string(&hasher.finalize()) != file.checksum {
        return Err(Error::Integrity("payload checksum mismatch".to_string()));
    }
    let cfg = Config::from_toml(&file.config_toml)?;
    if cfg.hash() != file.config_hash {
        return Err(Error::Integrity("embedded config hash mismatch".to_string()));
    }
    let state: TrainerState<T> = serde_json::from_str(&file.payload)?;
    Ok((cfg, state))
}
