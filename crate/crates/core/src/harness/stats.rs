//! Score normalization and multi-seed aggregates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Result};

/// `(agent - random) / (expert - random)`.
pub fn normalized_score(agent: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    let denom = expert_ref - random_ref;
    if denom == 0.0 || !denom.is_finite() {
        return Err(domain(format!("expert and random references coincide ({expert_ref})")));
    }
    Ok((agent - random_ref) / denom)
}

/// Interquartile mean: sort, drop `floor(n / 4)` scores from each end and
/// average the rest.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(domain("iqm of an empty list"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted.len() / 4;
    let middle = &sorted[cut..sorted.len() - cut];
    Ok(middle.iter().sum::<f64>() / middle.len() as f64)
}

pub fn mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(domain("mean of an empty list"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Median with the two middle values averaged for even lengths.
pub fn median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(domain("median of an empty list"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Iqm,
    Median,
}

impl Statistic {
    pub fn apply(self, scores: &[f64]) -> Result<f64> {
        match self {
            Statistic::Mean => mean(scores),
            Statistic::Iqm => iqm(scores),
            Statistic::Median => median(scores),
        }
    }
}

/// Percentile bootstrap 95% interval (2.5th and 97.5th percentiles of the
/// resampled statistic, nearest-rank).
pub fn bootstrap_ci(scores: &[f64], statistic: Statistic, n_resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_resamples < 1000 {
        return Err(usage(format!("bootstrap needs at least 1000 resamples, got {n_resamples}")));
    }
    if scores.is_empty() {
        return Err(domain("bootstrap of an empty list"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scores.len();
    let mut resample = vec![0.0; n];
    let mut stats = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        for slot in resample.iter_mut() {
            *slot = scores[rng.random_range(0..n)];
        }
        stats.push(statistic.apply(&resample)?);
    }
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((q * n_resamples as f64).ceil() as usize).clamp(1, n_resamples) - 1];
    Ok((at(0.025), at(0.975)))
}
