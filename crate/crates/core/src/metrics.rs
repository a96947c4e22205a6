//! Full-catalog ranking metrics for a single held-out target per user.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// 1-based rank of `target`: one plus the number of other items scoring at
/// least as high, so the target loses every tie.
pub fn rank_target(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && s >= t)
        .count()
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / ranks.len() as f64)
}

fn check(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::config("no ranks to evaluate"));
    }
    if k == 0 {
        return Err(Error::config("cutoff K must be at least 1"));
    }
    Ok(())
}

/// Recall and NDCG at 10 and 50.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub recall10: f64,
    pub ndcg10: f64,
    pub recall50: f64,
    pub ndcg50: f64,
}

impl MetricSet {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(MetricSet {
            recall10: recall_at_k(ranks, 10)?,
            ndcg10: ndcg_at_k(ranks, 10)?,
            recall50: recall_at_k(ranks, 50)?,
            ndcg50: ndcg_at_k(ranks, 50)?,
        })
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("recall@10", self.recall10),
            ("ndcg@10", self.ndcg10),
            ("recall@50", self.recall50),
            ("ndcg@50", self.ndcg50),
        ])
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.to_map()).expect("finite map serializes")
    }

    pub fn is_finite(&self) -> bool {
        [self.recall10, self.ndcg10, self.recall50, self.ndcg50]
            .iter()
            .all(|v| v.is_finite())
    }
}
