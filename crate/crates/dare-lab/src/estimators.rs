//! Difficulty estimators.
//!
//! The co-evolved estimator recomputes current-policy log-probs on buffered
//! tokens, clips the total log-ratio, and self-normalizes; an ESS gate decides
//! whether the SNIS value is trusted or the embedding cold start is used
//! instead. The remaining estimators are the baselines: previous/current
//! failure rate, Bayesian posterior with temporal discounting, entropy proxy,
//! and the constant random label.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, ReplayBuffer};
use crate::error::{Error, Result};
use crate::policy::ToyPolicy;
use crate::streams::{stream, Domain};
use crate::world::{rollout, PromptSpec, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Snis,
    Coldstart,
    Bayes,
    PrevFr,
    CurrentFr,
    Entropy,
    Random,
}

impl fmt::Display for EstimateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimateSource::Snis => "snis",
            EstimateSource::Coldstart => "coldstart",
            EstimateSource::Bayes => "bayes",
            EstimateSource::PrevFr => "prev_fr",
            EstimateSource::CurrentFr => "current_fr",
            EstimateSource::Entropy => "entropy",
            EstimateSource::Random => "random",
        };
        f.write_str(s)
    }
}

/// A difficulty value in [0,1] with provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEstimate {
    pub value: f64,
    pub source: EstimateSource,
    /// Effective sample size of the SNIS weights, when computed (also recorded
    /// on gate rejection).
    pub ess: Option<f64>,
    /// Rollouts used.
    pub k: usize,
    pub mc_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub prompt_id: usize,
    pub difficulty: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub entries: Vec<ReferenceEntry>,
}

/// Per-prompt Beta posterior with temporal discounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesState {
    pub alpha0: f64,
    pub beta0: f64,
    pub decay: f64,
    per_prompt: BTreeMap<usize, (f64, f64)>,
}

impl BayesState {
    pub fn new(alpha0: f64, beta0: f64, decay: f64) -> Self {
        BayesState {
            alpha0,
            beta0,
            decay,
            per_prompt: BTreeMap::new(),
        }
    }

    pub fn params(&self, prompt_id: usize) -> Option<(f64, f64)> {
        self.per_prompt.get(&prompt_id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnisConfig {
    /// Log-ratio clip c.
    pub clip: f64,
    /// ESS acceptance threshold tau.
    pub tau_ess: f64,
    /// Failure probability delta of the finite-sample bound.
    pub delta: f64,
    /// Lower bound on the mean clipped weight; `None` uses exp(-clip), which
    /// always holds since clipped weights lie in [exp(-c), exp(c)].
    pub b_min: Option<f64>,
}

impl Default for SnisConfig {
    fn default() -> Self {
        SnisConfig {
            clip: 4.0,
            tau_ess: 3.0,
            delta: 0.05,
            b_min: None,
        }
    }
}

impl SnisConfig {
    pub fn resolved_b_min(&self) -> f64 {
        self.b_min.unwrap_or_else(|| (-self.clip).exp())
    }
}

/// Clipped self-normalized importance weights for buffered rollouts under the
/// current policy. Current-policy log-probs are recomputed on the stored
/// tokens; forced hint positions contribute 0 to both sums.
pub fn snis_weights(
    entries: &[BufferEntry],
    prompt: &PromptSpec,
    policy: &ToyPolicy,
    clip: f64,
) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(entries.len());
    for entry in entries {
        let forced = entry.rollout.forced_len(prompt);
        let mut current_sum = 0.0;
        for (pos, &tok) in entry.rollout.tokens.iter().enumerate() {
            if tok >= policy.vocab {
                return Err(Error::Data(format!(
                    "token {tok} out of vocab {} in buffered rollout for prompt {}",
                    policy.vocab, entry.prompt_id
                )));
            }
            if pos < forced {
                continue;
            }
            current_sum += policy.decode_distribution(prompt.id, pos).log_probs[tok];
        }
        let behavior_sum: f64 = entry.rollout.behavior_logprobs.iter().sum();
        let log_ratio = (current_sum - behavior_sum).clamp(-clip, clip);
        weights.push(log_ratio.exp());
    }
    Ok(weights)
}

/// Sum w_k (1 - r_k) / Sum w_k.
pub fn snis_difficulty(weights: &[f64], rewards: &[f64]) -> Result<f64> {
    if weights.len() != rewards.len() || weights.is_empty() {
        return Err(Error::Data(format!(
            "weights/rewards length mismatch: {} vs {}",
            weights.len(),
            rewards.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateWeights(weights.len()));
    }
    let num: f64 = weights
        .iter()
        .zip(rewards)
        .map(|(w, r)| w * (1.0 - r))
        .sum();
    Ok(num / sum)
}

/// Effective sample size (Sum w)^2 / Sum w^2, in [1, K].
pub fn ess(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum <= 0.0 || sq <= 0.0 {
        return Err(Error::DegenerateWeights(weights.len()));
    }
    Ok(sum * sum / sq)
}

/// Similarity-weighted cold-start estimate: softmax attention over reference
/// embeddings scaled by 1/sqrt(h).
pub fn cold_start(prompt: &PromptSpec, reference: &ReferenceSet) -> Result<f64> {
    if reference.entries.is_empty() {
        return Err(Error::Data("empty reference set".to_string()));
    }
    let h = prompt.features.len();
    let scale = 1.0 / (h as f64).sqrt();
    let mut scores = Vec::with_capacity(reference.entries.len());
    for entry in &reference.entries {
        if entry.embedding.len() != h {
            return Err(Error::Data(format!(
                "embedding dimension {} != feature dimension {h}",
                entry.embedding.len()
            )));
        }
        let dot: f64 = prompt
            .features
            .iter()
            .zip(&entry.embedding)
            .map(|(a, b)| a * b)
            .sum();
        scores.push(dot * scale);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(reference
        .entries
        .iter()
        .zip(&exp)
        .map(|(e, a)| a / z * e.difficulty)
        .sum())
}

/// Rolls out the world's reference prompts and records their failure rates
/// as initial difficulties, with prompt features as embeddings.
pub fn build_reference(world: &World, policy: &ToyPolicy, group_size: usize, seed: u64) -> ReferenceSet {
    let entries = world
        .reference_ids
        .iter()
        .map(|&rid| {
            let prompt = &world.prompts[rid];
            let mut failures = 0usize;
            for i in 0..group_size {
                let mut rng = stream(seed, Domain::Reference, 0, rid as u64, i as u64);
                let r = rollout(policy, prompt, None, world.t_max, 0, &mut rng)
                    .expect("unhinted rollout cannot fail");
                failures += (r.reward == 0) as usize;
            }
            ReferenceEntry {
                prompt_id: rid,
                difficulty: failures as f64 / group_size.max(1) as f64,
                embedding: prompt.features.clone(),
            }
        })
        .collect();
    ReferenceSet { entries }
}

/// The co-evolved estimate: SNIS over non-hinted buffered rollouts when the
/// ESS gate accepts, embedding cold start otherwise (the rejected ESS is
/// still recorded).
pub fn estimate(
    prompt: &PromptSpec,
    buffer: &ReplayBuffer,
    policy: &ToyPolicy,
    reference: &ReferenceSet,
    config: &SnisConfig,
) -> Result<DifficultyEstimate> {
    let usable: Vec<BufferEntry> = buffer
        .entries(prompt.id)
        .into_iter()
        .filter(|e| !e.rollout.hinted)
        .collect();
    if usable.is_empty() {
        let value = cold_start(prompt, reference)?;
        return Ok(DifficultyEstimate {
            value,
            source: EstimateSource::Coldstart,
            ess: None,
            k: 0,
            mc_stderr: None,
        });
    }
    let weights = snis_weights(&usable, prompt, policy, config.clip)?;
    let rewards: Vec<f64> = usable.iter().map(|e| e.rollout.reward_f64()).collect();
    let k = usable.len();
    let effective = match ess(&weights) {
        Ok(e) => e,
        Err(_) => {
            // Degenerate weights behave like an ESS below any threshold.
            let value = cold_start(prompt, reference)?;
            return Ok(DifficultyEstimate {
                value,
                source: EstimateSource::Coldstart,
                ess: None,
                k,
                mc_stderr: None,
            });
        }
    };
    if effective >= config.tau_ess {
        let value = snis_difficulty(&weights, &rewards)?;
        Ok(DifficultyEstimate {
            value,
            source: EstimateSource::Snis,
            ess: Some(effective),
            k,
            mc_stderr: None,
        })
    } else {
        let value = cold_start(prompt, reference)?;
        Ok(DifficultyEstimate {
            value,
            source: EstimateSource::Coldstart,
            ess: Some(effective),
            k,
            mc_stderr: None,
        })
    }
}

/// Right-hand side of the finite-sample SNIS error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRadius {
    pub epsilon_delta: f64,
    pub radius: f64,
}

/// Evaluates 2 eps_delta / (b_min - eps_delta) + clip_bias / b_min with
/// eps_delta = e^c sqrt(ln(4/delta) / (2K)).
pub fn bound_radius(config: &SnisConfig, k: usize, clip_bias_term: f64) -> Result<BoundRadius> {
    bound_radius_with(config.clip, config.delta, config.resolved_b_min(), k, clip_bias_term)
}

pub fn bound_radius_with(
    clip: f64,
    delta: f64,
    b_min: f64,
    k: usize,
    clip_bias_term: f64,
) -> Result<BoundRadius> {
    let c_w = clip.exp();
    let epsilon_delta = c_w * ((4.0 / delta).ln() / (2.0 * k as f64)).sqrt();
    if epsilon_delta >= b_min {
        return Err(Error::BoundInapplicable {
            epsilon_delta,
            b_min,
        });
    }
    let radius = 2.0 * epsilon_delta / (b_min - epsilon_delta) + clip_bias_term / b_min;
    Ok(BoundRadius {
        epsilon_delta,
        radius,
    })
}

/// Buffered failure rate with unit weights; 0.5 when no history exists.
pub fn previous_fr(entries: &[BufferEntry]) -> f64 {
    if entries.is_empty() {
        return 0.5;
    }
    let failures: f64 = entries.iter().map(|e| 1.0 - e.rollout.reward_f64()).sum();
    failures / entries.len() as f64
}

/// Ground-truth oracle: failure rate of `group_size` fresh rollouts.
pub fn current_fr(
    policy: &ToyPolicy,
    prompt: &PromptSpec,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut failures = 0usize;
    for _ in 0..group_size {
        let r = rollout(policy, prompt, None, policy.t_max, 0, rng)
            .expect("unhinted rollout cannot fail");
        failures += (r.reward == 0) as usize;
    }
    failures as f64 / group_size.max(1) as f64
}

/// alpha <- lambda alpha + (1-lambda) alpha0 + s;
/// beta  <- lambda beta  + (1-lambda) beta0  + (k-s).
pub fn bayes_update(state: &mut BayesState, prompt_id: usize, successes: usize, count: usize) {
    debug_assert!(successes <= count);
    let (alpha, beta) = state
        .per_prompt
        .get(&prompt_id)
        .copied()
        .unwrap_or((state.alpha0, state.beta0));
    let lambda = state.decay;
    let alpha = lambda * alpha + (1.0 - lambda) * state.alpha0 + successes as f64;
    let beta = lambda * beta + (1.0 - lambda) * state.beta0 + (count - successes) as f64;
    state.per_prompt.insert(prompt_id, (alpha, beta));
}

/// Thompson draw: 1 - gamma with gamma ~ Beta(alpha_q, beta_q); untracked
/// prompts get the default label 0.5.
pub fn bayes_estimate(state: &BayesState, prompt_id: usize, rng: &mut ChaCha8Rng) -> f64 {
    match state.per_prompt.get(&prompt_id) {
        Some(&(alpha, beta)) => {
            let dist = Beta::new(alpha, beta).expect("positive Beta parameters");
            1.0 - dist.sample(rng)
        }
        None => 0.5,
    }
}

/// Mean token-level entropy (nats) along one sampled prefix of at most
/// `l_prefix` tokens.
pub fn entropy_score(
    policy: &ToyPolicy,
    prompt: &PromptSpec,
    l_prefix: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let limit = l_prefix.clamp(1, policy.t_max);
    let mut sum = 0.0;
    let mut visited = 0usize;
    for pos in 0..limit {
        let dist = policy.decode_distribution(prompt.id, pos);
        sum += dist.entropy();
        visited += 1;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tok = dist.probs.len() - 1;
        for (v, &p) in dist.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = v;
                break;
            }
        }
        if policy.eos_token == Some(tok) {
            break;
        }
    }
    sum / visited as f64
}

/// The uniform predicted label.
pub fn random_estimate() -> f64 {
    0.5
}
