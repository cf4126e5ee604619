use serde::{Deserialize, Serialize};

use super::RedundancyCodebook;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum PruneMode {
    Threshold(f64),
    Budget(usize),
}

/// Retained token indices, ascending, and every token's redundancy score.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub kept: Vec<usize>,
    pub scores: Vec<f64>,
    pub mode: PruneMode,
}

/// Maximum cosine similarity of each token to any prototype.
pub fn redundancy_scores(t: &TokenMatrix, cb: &RedundancyCodebook) -> Result<Vec<f64>> {
    let sim = cosine_similarity_matrix(t, &cb.prototypes)?;
    Ok((0..sim.rows)
        .map(|i| sim.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Indices with `score <= r`, in order.
pub fn keep_at_most(scores: &[f64], r: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] <= r).collect()
}

/// The `budget` indices with the lowest scores (ties to the lower index),
/// returned in ascending index order.
pub fn keep_lowest(scores: &[f64], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(budget);
    order.sort_unstable();
    order
}

pub fn prune_threshold(t: &TokenMatrix, cb: &RedundancyCodebook, r: f64) -> Result<PruneResult> {
    let scores = redundancy_scores(t, cb)?;
    let kept = keep_at_most(&scores, r);
    if kept.is_empty() {
        log::warn!("r_threshold {r} prunes every token");
    }
    Ok(PruneResult {
        kept,
        scores,
        mode: PruneMode::Threshold(r),
    })
}

pub fn prune_budget(
    t: &TokenMatrix,
    cb: &RedundancyCodebook,
    budget: usize,
) -> Result<PruneResult> {
    let scores = redundancy_scores(t, cb)?;
    Ok(PruneResult {
        kept: keep_lowest(&scores, budget),
        scores,
        mode: PruneMode::Budget(budget),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub r_threshold: f64,
    /// Mean retained count per image at `r_threshold`.
    pub achieved_mean: f64,
}

/// Smallest `r` whose mean retained count over `images` reaches
/// `target_mean`.
///
/// The retained count only changes at score values, so the search runs over
/// the sorted scores directly; this is the exact limit of bisecting `r` over
/// `[-1, 1]`.
pub fn calibrate_threshold(
    images: &[&TokenMatrix],
    cb: &RedundancyCodebook,
    target_mean: f64,
) -> Result<Calibration> {
    if images.is_empty() {
        return Err(Error::InvalidInput(
            "calibration needs at least one image".into(),
        ));
    }
    let mean_len = images.iter().map(|t| t.rows()).sum::<usize>() as f64 / images.len() as f64;
    if !(target_mean > 0.0 && target_mean <= mean_len) {
        return Err(Error::InvalidInput(format!(
            "target mean {target_mean} outside (0, {mean_len}]"
        )));
    }
    let mut all = Vec::new();
    for t in images {
        all.extend(redundancy_scores(t, cb)?);
    }
    all.sort_by(f64::total_cmp);
    let n_images = images.len() as f64;
    let needed = (target_mean * n_images - 1e-9).ceil() as usize;
    let needed = needed.clamp(1, all.len());
    let r = all[needed - 1];
    let retained = all.partition_point(|&s| s <= r);
    let achieved_mean = retained as f64 / n_images;
    if achieved_mean - target_mean >= 1.0 {
        log::warn!(
            "tied scores: closest achievable mean is {achieved_mean:.3} for target {target_mean:.3}"
        );
    }
    Ok(Calibration {
        r_threshold: r,
        achieved_mean,
    })
}

/// `L * N * (2d - 1)`: cost of scoring `L` tokens against `N` prototypes.
pub fn probing_flops(l: u64, n: u64, d: u64) -> Result<u64> {
    if l == 0 || n == 0 || d == 0 {
        return Err(Error::InvalidInput("L, N and d must be positive".into()));
    }
    d.checked_mul(2)
        .map(|v| v - 1)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| Error::Range(format!("{l} x {n} x (2 x {d} - 1) overflows u64")))
}
