//! Labeled / unlabeled / validation split construction, stratified by the
//! set of classes present in each image.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Dataset;

/// Disjoint id partitions of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub validation: Vec<u64>,
    pub labeled_pct: f64,
    pub fold_seed: u64,
}

/// Validation ids are fixed (independent of `fold_seed`) before the
/// labeled/unlabeled partition; the labeled set is a stratified random
/// sample with the target size accurate to one image.
pub fn make_split<T: Scalar>(
    ds: &Dataset<T>,
    labeled_pct: f64,
    fold_seed: u64,
    val_frac: f64,
) -> Result<SplitManifest> {
    if !(labeled_pct > 0.0 && labeled_pct <= 100.0) {
        return Err(Error::config(format!("labeled_pct must be in (0,100], got {labeled_pct}")));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::config(format!("val_frac must be in [0,1), got {val_frac}")));
    }
    if ds.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }

    // validation: deterministic shuffle with a fixed seed shared by every fold
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut val_rng = ChaCha8Rng::seed_from_u64(0x56414C5F53504C49);
    order.shuffle(&mut val_rng);
    let n_val = (ds.len() as f64 * val_frac).round() as usize;
    let validation: Vec<u64> = order[..n_val].iter().map(|&i| ds.ids[i]).collect();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    train.sort_unstable();

    // stratify by class-presence signature
    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for &i in &train {
        let mut sig = 0u64;
        for b in &ds.boxes[i] {
            sig |= 1 << (b.class_id as u64).min(63);
        }
        groups.entry(sig).or_default().push(i);
    }

    let target = ((labeled_pct / 100.0) * train.len() as f64).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    // largest-remainder allocation across groups, then per-group shuffle
    let mut alloc: Vec<(u64, usize, f64)> = groups
        .iter()
        .map(|(&sig, members)| {
            let exact = target as f64 * members.len() as f64 / train.len() as f64;
            (sig, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = alloc.iter().map(|a| a.1).sum();
    alloc.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut k = 0;
    while assigned < target {
        let idx = k % alloc.len();
        let cap = groups[&alloc[idx].0].len();
        if alloc[idx].1 < cap {
            alloc[idx].1 += 1;
            assigned += 1;
        }
        k += 1;
        if k > alloc.len() * (target + 1) {
            break; // every group exhausted
        }
    }

    let mut labeled = Vec::with_capacity(target);
    let mut unlabeled = Vec::new();
    for (sig, take, _) in alloc {
        let mut members = groups[&sig].clone();
        members.shuffle(&mut rng);
        let take = take.min(members.len());
        for &i in &members[..take] {
            labeled.push(ds.ids[i]);
        }
        for &i in &members[take..] {
            unlabeled.push(ds.ids[i]);
        }
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();

    Ok(SplitManifest {
        labeled,
        unlabeled,
        validation,
        labeled_pct,
        fold_seed,
    })
}
