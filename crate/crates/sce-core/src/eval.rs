//! Unsampled top-K ranking metrics over the full catalog: NDCG@K, HR@K,
//! and COV@K at each holdout user's final position.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::{forward, ModelState};
use crate::data::{batch_for_inference, HoldoutUser};
use crate::error::{Error, Result};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsAtK {
    pub ndcg: f64,
    pub hr: f64,
    pub cov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by K.
    pub at: BTreeMap<usize, MetricsAtK>,
    pub n_users: usize,
    pub exclude_history: bool,
}

impl MetricsReport {
    pub fn ndcg(&self, k: usize) -> f64 {
        self.at.get(&k).map(|m| m.ndcg).unwrap_or(0.0)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.at.get(&k).map(|m| m.hr).unwrap_or(0.0)
    }

    pub fn cov(&self, k: usize) -> f64 {
        self.at.get(&k).map(|m| m.cov).unwrap_or(0.0)
    }
}

/// Items (catalog rows 0..C-1) ranked by descending score, ties broken by
/// lower index, exclusions removed before ranking.
pub fn rank_items(scores: &[f64], exclusions: &BTreeSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !exclusions.contains(i)).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("NaN score").then(a.cmp(&b))
    });
    order
}

/// 1-based rank of `target` among non-excluded items without sorting:
/// one plus the number of items strictly ahead under the tie rule.
pub fn rank_of_target(scores: &[f64], target: usize, exclusions: &BTreeSet<usize>) -> usize {
    let ts = scores[target];
    let mut ahead = 0usize;
    for (j, &sj) in scores.iter().enumerate() {
        if j == target || exclusions.contains(&j) {
            continue;
        }
        if sj > ts || (sj == ts && j < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Top-k items by score (excluding `exclusions`), descending, index ties
/// toward the lower index.
pub fn top_k_items(scores: &[f64], k: usize, exclusions: &BTreeSet<usize>) -> Vec<usize> {
    let mut order = rank_items(scores, exclusions);
    order.truncate(k);
    order
}

/// Single-relevant-item NDCG: 1/log2(1+rank) inside the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(k >= 1 && rank >= 1);
    if rank <= k {
        1.0 / ((1 + rank) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Catalog fraction covered by the union of per-user top-K lists.
pub fn cov_at_k(top_lists: &[Vec<usize>], k: usize, catalog: usize) -> f64 {
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    for list in top_lists {
        seen.extend(list.iter().take(k).copied());
    }
    seen.len() as f64 / catalog as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    /// Rank the validation target given the user's history.
    Validation,
    /// Rank the test target given history plus the validation item.
    Test,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Remove already-seen items from the ranking (the target itself is
    /// never excluded).
    pub exclude_history: bool,
    pub target: EvalTarget,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 5, 10],
            exclude_history: true,
            target: EvalTarget::Test,
            batch_size: 64,
        }
    }
}

/// Rank every holdout user's target against the full catalog and aggregate
/// NDCG/HR/COV at each requested K.
pub fn evaluate(
    state: &ModelState,
    holdout: &[HoldoutUser],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if holdout.is_empty() {
        return Err(Error::Data("no holdout users to evaluate".into()));
    }
    let cfg = &state.config;
    let c = cfg.catalog;
    let d = cfg.d;
    let max_k = opts.ks.iter().copied().max().unwrap_or(10);

    // (context items, target item) per user, in dense item ids.
    let cases: Vec<(Vec<usize>, usize)> = holdout
        .iter()
        .map(|h| match opts.target {
            EvalTarget::Validation => (h.history.clone(), h.val_target),
            EvalTarget::Test => {
                let mut ctx = h.history.clone();
                ctx.push(h.val_target);
                (ctx, h.test_target)
            }
        })
        .collect();

    let mut rank_sum_ndcg: BTreeMap<usize, f64> = opts.ks.iter().map(|&k| (k, 0.0)).collect();
    let mut rank_sum_hr: BTreeMap<usize, f64> = rank_sum_ndcg.clone();
    let mut top_lists: Vec<Vec<usize>> = Vec::with_capacity(cases.len());

    for chunk in cases.chunks(opts.batch_size) {
        let histories: Vec<&[usize]> = chunk.iter().map(|(ctx, _)| ctx.as_slice()).collect();
        let batch = batch_for_inference(&histories, cfg.max_len);
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, state, &batch, None)?;
        let x = tape.data(fwd.x);
        for (row, (ctx, target)) in chunk.iter().enumerate() {
            let x_last = &x[(row * cfg.max_len + cfg.max_len - 1) * d..][..d];
            let target_row = target - 1;
            let mut scores = vec![0.0; c];
            for (j, sc) in scores.iter_mut().enumerate() {
                *sc = x_last.iter().zip(state.catalog_row(j + 1)).map(|(a, b)| a * b).sum();
            }
            let exclusions: BTreeSet<usize> = if opts.exclude_history {
                ctx.iter().map(|&it| it - 1).filter(|&r| r != target_row).collect()
            } else {
                BTreeSet::new()
            };
            if exclusions.len() >= c {
                return Err(Error::Data("history excludes the whole catalog".into()));
            }
            let rank = rank_of_target(&scores, target_row, &exclusions);
            for &k in &opts.ks {
                *rank_sum_ndcg.get_mut(&k).unwrap() += ndcg_at_k(rank, k);
                *rank_sum_hr.get_mut(&k).unwrap() += hr_at_k(rank, k);
            }
            top_lists.push(top_k_items(&scores, max_k, &exclusions));
        }
    }

    let n = cases.len() as f64;
    let at: BTreeMap<usize, MetricsAtK> = opts
        .ks
        .iter()
        .map(|&k| {
            (
                k,
                MetricsAtK {
                    ndcg: rank_sum_ndcg[&k] / n,
                    hr: rank_sum_hr[&k] / n,
                    cov: cov_at_k(&top_lists, k, c),
                },
            )
        })
        .collect();
    Ok(MetricsReport { at, n_users: cases.len(), exclude_history: opts.exclude_history })
}
