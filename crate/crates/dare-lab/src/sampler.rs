//! Difficulty-guided batch selection.
//!
//! Prompts are drawn without replacement with probability proportional to a
//! symmetric Beta density over their estimated difficulty, biasing batches
//! toward the middle of the difficulty range while keeping every prompt with
//! d in (0,1) reachable. An entropy-softmax mode covers the entropy baseline's
//! selection rule, and a uniform mode covers random selection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Beta,
    EntropySoftmax,
    Uniform,
}

/// Unnormalized per-prompt selection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights {
    pub mode: SamplerMode,
    /// (prompt id, weight >= 0) pairs.
    pub weights: Vec<(usize, f64)>,
}

/// Unnormalized symmetric Beta density [d(1-d)]^{kappa/2}, in log space.
/// kappa = 0 is the uniform density; endpoints with kappa > 0 get weight 0.
pub fn beta_weight(d_hat: f64, kappa: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&d_hat));
    debug_assert!(kappa >= 0.0);
    if kappa == 0.0 {
        return 1.0;
    }
    if d_hat <= 0.0 || d_hat >= 1.0 {
        return 0.0;
    }
    (0.5 * kappa * (d_hat.ln() + (1.0 - d_hat).ln())).exp()
}

impl SamplingWeights {
    pub fn beta(estimates: &[(usize, f64)], kappa: f64) -> Self {
        SamplingWeights {
            mode: SamplerMode::Beta,
            weights: estimates
                .iter()
                .map(|&(id, d)| (id, beta_weight(d, kappa)))
                .collect(),
        }
    }

    /// exp(score / tau), stabilized by the max score.
    pub fn entropy_softmax(scores: &[(usize, f64)], tau_ent: f64) -> Self {
        let tau = tau_ent.max(1e-12);
        let max = scores
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        SamplingWeights {
            mode: SamplerMode::EntropySoftmax,
            weights: scores
                .iter()
                .map(|&(id, s)| (id, ((s - max) / tau).exp()))
                .collect(),
        }
    }

    pub fn uniform(ids: &[usize]) -> Self {
        SamplingWeights {
            mode: SamplerMode::Uniform,
            weights: ids.iter().map(|&id| (id, 1.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub ids: Vec<usize>,
    /// Set when fewer than the requested number of prompts had positive weight.
    pub shortfall: bool,
}

/// Sequential weighted sampling without replacement: draw proportional to
/// weight, remove, renormalize.
pub fn sample_batch(
    weights: &SamplingWeights,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchSample> {
    let mut pool: Vec<(usize, f64)> = weights
        .weights
        .iter()
        .filter(|&&(_, w)| w > 0.0)
        .copied()
        .collect();
    if pool.is_empty() {
        return Err(Error::Selection("all sampling weights are zero".to_string()));
    }
    let shortfall = pool.len() < batch_size;
    let take = batch_size.min(pool.len());
    let mut ids = Vec::with_capacity(take);
    let mut total: f64 = pool.iter().map(|&(_, w)| w).sum();
    for _ in 0..take {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = pool.len() - 1;
        for (i, &(_, w)) in pool.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let (id, w) = pool.remove(chosen);
        ids.push(id);
        total -= w;
        if total <= 0.0 && !pool.is_empty() {
            // Numerical exhaustion: remaining weights are zero-mass.
            break;
        }
    }
    Ok(BatchSample { ids, shortfall })
}
