//! HR@K, NDCG@K and AUC for single-target next-item prediction.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DecomposedSequence;
use crate::error::{Error, Result};
use crate::model::HyTRecModel;

/// Where one target landed among all items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub target: usize,
    /// `1 + #{scored higher} + #{tied with a smaller item id}`.
    pub rank: usize,
    pub vocab_size: usize,
    pub below: usize,
    pub ties: usize,
    pub target_score: f64,
    pub max_score: f64,
}

pub fn rank_target(scores: &[f64], target: usize) -> Result<RankingResult> {
    if target >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} scores",
            scores.len()
        )));
    }
    let s = scores[target];
    let (mut above, mut below, mut ties, mut ties_before) = (0, 0, 0, 0);
    for (i, &x) in scores.iter().enumerate() {
        if i == target {
            continue;
        }
        if x > s {
            above += 1;
        } else if x < s {
            below += 1;
        } else {
            ties += 1;
            if i < target {
                ties_before += 1;
            }
        }
    }
    Ok(RankingResult {
        target,
        rank: 1 + above + ties_before,
        vocab_size: scores.len(),
        below,
        ties,
        target_score: s,
        max_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn nonempty(results: &[RankingResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be at least 1".into()));
    }
    Ok(())
}

pub fn hit_rate_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    nonempty(results)?;
    check_k(k)?;
    Ok(results.iter().filter(|r| r.rank <= k).count() as f64 / results.len() as f64)
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    nonempty(results)?;
    check_k(k)?;
    let gain: f64 = results
        .iter()
        .filter(|r| r.rank <= k)
        .map(|r| 1.0 / ((r.rank + 1) as f64).log2())
        .sum();
    Ok(gain / results.len() as f64)
}

/// Mean fraction of non-target items scored below the target, ties counting
/// one half.
pub fn auc(results: &[RankingResult]) -> Result<f64> {
    nonempty(results)?;
    let total: f64 = results
        .iter()
        .map(|r| {
            if r.vocab_size < 2 {
                1.0
            } else {
                (r.below as f64 + 0.5 * r.ties as f64) / (r.vocab_size - 1) as f64
            }
        })
        .sum();
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictions: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub auc: f64,
    pub mean_latency_ms: f64,
}

/// Ranks every example's target under `model`.
pub fn rank_examples(model: &HyTRecModel, examples: &[DecomposedSequence]) -> Result<(Vec<RankingResult>, f64)> {
    if examples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let timed: Vec<Result<(RankingResult, f64)>> = examples
        .par_iter()
        .map(|ex| {
            let start = Instant::now();
            let scores = model.scores(&ex.to_input())?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            Ok((rank_target(scores.data(), ex.target)?, ms))
        })
        .collect();
    let mut results = Vec::with_capacity(timed.len());
    let mut latency = 0.0;
    for t in timed {
        let (r, ms) = t?;
        results.push(r);
        latency += ms;
    }
    let n = results.len() as f64;
    Ok((results, latency / n))
}

pub fn evaluate(model: &HyTRecModel, examples: &[DecomposedSequence], ks: &[usize]) -> Result<EvalReport> {
    let (results, latency) = rank_examples(model, examples)?;
    report(&results, ks, latency)
}

pub fn report(results: &[RankingResult], ks: &[usize], mean_latency_ms: f64) -> Result<EvalReport> {
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(k, hit_rate_at_k(results, k)?);
        ndcg.insert(k, ndcg_at_k(results, k)?);
    }
    Ok(EvalReport {
        predictions: results.len(),
        hr,
        ndcg,
        auc: auc(results)?,
        mean_latency_ms,
    })
}
