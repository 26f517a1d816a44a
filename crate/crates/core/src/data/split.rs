//! Seeded train/validation/test and k-fold partitions.
//!
//! Classification datasets are stratified by label. When a dataset carries
//! `group` ids (e.g. the source image of rotated copies) whole groups are
//! assigned together so no group straddles two parts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::objective::LossKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPlan {
    KFold { folds: usize, seed: u64 },
    Fractions { train: f64, val: f64, test: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    /// Row indices of each fold; folds are disjoint and cover every row.
    Folds(Vec<Vec<usize>>),
    Holdout {
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
}

/// Units are rows, or groups of rows sharing a `group` id.
fn units(ds: &Dataset) -> Vec<Vec<usize>> {
    match &ds.group {
        None => (0..ds.len()).map(|i| vec![i]).collect(),
        Some(g) => {
            let mut ids: Vec<usize> = g.clone();
            ids.sort_unstable();
            ids.dedup();
            let mut out = vec![Vec::new(); ids.len()];
            for (row, gid) in g.iter().enumerate() {
                let k = ids.binary_search(gid).expect("id collected");
                out[k].push(row);
            }
            out
        }
    }
}

/// Unit order after shuffling; stratified plans interleave labels evenly.
fn ordered_units(ds: &Dataset, units: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(rng);
    if ds.task != LossKind::Bce {
        return order;
    }
    let label = |u: usize| ds.y[units[u][0]] > 0.5;
    let (pos, neg): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&u| label(u));
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(units.len());
    for class in [&neg, &pos] {
        let m = class.len() as f64;
        keyed.extend(class.iter().enumerate().map(|(j, &u)| ((j as f64 + 0.5) / m, u)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, u)| u).collect()
}

pub fn split(ds: &Dataset, plan: &SplitPlan) -> Result<Split> {
    let units = units(ds);
    let expand = |us: &[usize]| -> Vec<usize> {
        let mut rows: Vec<usize> = us.iter().flat_map(|&u| units[u].iter().copied()).collect();
        rows.sort_unstable();
        rows
    };
    match *plan {
        SplitPlan::KFold { folds, seed } => {
            if folds < 2 {
                return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
            }
            if folds > units.len() {
                return Err(Error::Config(format!(
                    "{folds} folds exceed {} samples",
                    units.len()
                )));
            }
            let order = ordered_units(ds, &units, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut parts = vec![Vec::new(); folds];
            for (pos, &u) in order.iter().enumerate() {
                parts[pos % folds].push(u);
            }
            Ok(Split::Folds(parts.iter().map(|p| expand(p)).collect()))
        }
        SplitPlan::Fractions {
            train,
            val,
            test,
            seed,
        } => {
            let fr = [train, val, test];
            if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split fractions must be in [0, 1] and sum to 1, got {fr:?}"
                )));
            }
            let n = units.len();
            let n_train = (n as f64 * train).round() as usize;
            let n_val = ((n as f64 * val).round() as usize).min(n - n_train);
            if n_train == 0 {
                return Err(Error::Config(format!("{n} samples leave an empty training split")));
            }
            let order = ordered_units(ds, &units, &mut ChaCha8Rng::seed_from_u64(seed));
            // Interleaved order keeps every contiguous slice roughly stratified.
            let (tr, rest) = order.split_at(n_train);
            let (va, te) = rest.split_at(n_val);
            Ok(Split::Holdout {
                train: expand(tr),
                val: expand(va),
                test: expand(te),
            })
        }
    }
}

/// Indices not in `fold`, in ascending order.
pub(crate) fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in fold {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}
