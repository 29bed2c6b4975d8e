//! Tier assignment, per-tier budgets and reward shaping, group-relative
//! advantages, and the difficulty-conditioned clipped policy update.
//!
//! The update optimizes, per token, min(ratio * A, clip(ratio, 1-eps-, 1+eps+) * A)
//! with the ratio of current to stored behavior decode probabilities, averaged
//! per rollout, per group, then per batch, minus beta * KL(pi || pi_ref)
//! evaluated exactly at every visited (prompt, position) state. Gradients are
//! analytic; the tabular policy makes both the surrogate and the KL exact.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, ReplayBuffer};
use crate::error::{Error, Result};
use crate::estimators::{DifficultyEstimate, EstimateSource};
use crate::policy::ToyPolicy;
use crate::streams::{stream, Domain};
use crate::world::{rollout, PromptSpec, Rollout, World};

/// Standard-deviation floor for advantage standardization.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub d_easy: f64,
    pub d_hard: f64,
    pub g: usize,
    pub g_easy: usize,
    pub g_hard: usize,
    pub lambda_easy: f64,
    pub lambda_hard: f64,
    pub eps: f64,
    pub eps_plus_easy: f64,
    pub t_budget_easy: usize,
    pub beta_kl: f64,
    /// Fraction of fresh on-policy rollouts per group.
    pub sigma: f64,
    pub lr: f64,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig {
            d_easy: 0.3,
            d_hard: 0.8,
            g: 8,
            g_easy: 4,
            g_hard: 16,
            lambda_easy: 1e-4,
            lambda_hard: 1e-4,
            eps: 0.2,
            eps_plus_easy: 0.6,
            t_budget_easy: 4,
            beta_kl: 0.0,
            sigma: 0.5,
            lr: 0.05,
        }
    }
}

impl TierConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(0.0 < self.d_easy && self.d_easy < self.d_hard && self.d_hard < 1.0) {
            return Err(Error::config("d_easy", "need 0 < d_easy < d_hard < 1"));
        }
        if self.g_easy < 2 {
            return Err(Error::config("g_easy", "must be >= 2"));
        }
        if !(self.g_easy <= self.g && self.g <= self.g_hard) {
            return Err(Error::config("g", "need g_easy <= g <= g_hard"));
        }
        if self.lambda_hard >= 1.0 || self.lambda_hard < 0.0 {
            return Err(Error::config("lambda_hard", "must be in [0, 1)"));
        }
        if self.lambda_easy < 0.0 {
            return Err(Error::config("lambda_easy", "must be >= 0"));
        }
        if self.eps <= 0.0 || self.eps_plus_easy < self.eps {
            return Err(Error::config("eps", "need 0 < eps <= eps_plus_easy"));
        }
        if self.t_budget_easy == 0 || self.t_budget_easy > t_max {
            return Err(Error::config("t_budget_easy", "must be in [1, t_max]"));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::config("beta_kl", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::config("sigma", "must be in [0, 1]"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr", "must be > 0"));
        }
        Ok(())
    }
}

/// Easy below d_easy, hard above d_hard, boundaries inclusive to medium.
pub fn assign_tier(d_hat: f64, config: &TierConfig) -> Tier {
    if d_hat < config.d_easy {
        Tier::Easy
    } else if d_hat > config.d_hard {
        Tier::Hard
    } else {
        Tier::Medium
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierBudget {
    pub g_q: usize,
    pub length_budget: usize,
    pub eps_minus: f64,
    pub eps_plus: f64,
}

pub fn tier_budget(tier: Tier, config: &TierConfig, t_max: usize) -> TierBudget {
    match tier {
        Tier::Easy => TierBudget {
            g_q: config.g_easy,
            length_budget: config.t_budget_easy,
            eps_minus: config.eps,
            eps_plus: config.eps_plus_easy,
        },
        Tier::Medium => TierBudget {
            g_q: config.g,
            length_budget: t_max,
            eps_minus: config.eps,
            eps_plus: config.eps,
        },
        Tier::Hard => TierBudget {
            g_q: config.g_hard,
            length_budget: t_max,
            eps_minus: config.eps,
            eps_plus: config.eps,
        },
    }
}

/// Length-dependent penalty on correct easy rollouts, bounded length bonus on
/// incorrect hard rollouts; everything else passes through.
/// `t_max_group` is the maximum rollout length within the group.
pub fn shape_reward(
    tier: Tier,
    d_hat: f64,
    reward: f64,
    length: usize,
    t_max_group: usize,
    config: &TierConfig,
) -> f64 {
    let rel_len = length as f64 / t_max_group.max(1) as f64;
    match tier {
        Tier::Easy if reward == 1.0 => {
            let w = ((config.d_easy - d_hat) / config.d_easy).clamp(0.0, 1.0);
            reward - config.lambda_easy * w * rel_len
        }
        Tier::Hard if reward == 0.0 => {
            let w = ((d_hat - config.d_hard) / (1.0 - config.d_hard)).clamp(0.0, 1.0);
            reward + config.lambda_hard * w * rel_len
        }
        _ => reward,
    }
}

/// (r - mean) / max(population std, SIGMA_FLOOR); all-equal rewards yield
/// exactly zero advantages.
pub fn group_advantages(shaped_rewards: &[f64]) -> Result<Vec<f64>> {
    let n = shaped_rewards.len();
    if n < 2 {
        return Err(Error::Grouping(format!("group size {n} < 2")));
    }
    let first = shaped_rewards[0];
    if shaped_rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; n]);
    }
    let mean = shaped_rewards.iter().sum::<f64>() / n as f64;
    let var = shaped_rewards
        .iter()
        .map(|&r| (r - mean) * (r - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt().max(SIGMA_FLOOR);
    Ok(shaped_rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// One prompt's rollout group, shaped and standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainGroup {
    pub prompt_id: usize,
    pub tier: Tier,
    pub d_hat: f64,
    pub source: EstimateSource,
    pub rollouts: Vec<Rollout>,
    /// Forced hint prefix length per rollout (0 for standard ones).
    pub forced_lens: Vec<usize>,
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub eps_minus: f64,
    pub eps_plus: f64,
    pub n_fresh: usize,
    pub n_replay: usize,
    pub n_hinted: usize,
}

struct GroupPlan {
    prompt_id: usize,
    d_hat: f64,
    source: EstimateSource,
    tier: Tier,
    budget: TierBudget,
    n_fresh: usize,
    n_hinted: usize,
    hint: Option<Rollout>,
    replayed: Vec<Rollout>,
}

/// Builds tiered groups for a sampled batch: fresh rollouts (a fraction sigma
/// of each group, hint-augmented on the hard tier when a buffered success
/// exists), replay fill from the newest buffered entries, shaping, and
/// advantages. Fresh rollouts are pushed to the buffer.
pub fn build_groups(
    batch: &[(usize, DifficultyEstimate)],
    world: &World,
    buffer: &mut ReplayBuffer,
    policy: &ToyPolicy,
    config: &TierConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<TrainGroup>> {
    // Plan from the pre-step buffer state.
    let mut plans = Vec::with_capacity(batch.len());
    for &(prompt_id, est) in batch {
        world.prompt(prompt_id)?;
        let tier = assign_tier(est.value, config);
        let budget = tier_budget(tier, config, world.t_max);
        let n_fresh = ((config.sigma * budget.g_q as f64).ceil() as usize).min(budget.g_q);
        let replay_want = budget.g_q - n_fresh;
        let replayed: Vec<Rollout> = buffer
            .newest(prompt_id, replay_want)
            .into_iter()
            .map(|e| e.rollout)
            .collect();
        // Buffer shortfall tops up with fresh rollouts.
        let n_fresh = budget.g_q - replayed.len();
        let hint = if tier == Tier::Hard {
            buffer.select_hint(prompt_id)
        } else {
            None
        };
        let n_hinted = if hint.is_some() {
            (budget.g_q - config.g).min(n_fresh)
        } else {
            0
        };
        plans.push(GroupPlan {
            prompt_id,
            d_hat: est.value,
            source: est.source,
            tier,
            budget,
            n_fresh,
            n_hinted,
            hint,
            replayed,
        });
    }

    // Generate fresh rollouts; pure given (policy, streams), so parallel across
    // prompts with collection in batch order.
    let fresh: Vec<Result<Vec<Rollout>>> = plans
        .par_iter()
        .map(|plan| {
            let prompt = &world.prompts[plan.prompt_id];
            let mut out = Vec::with_capacity(plan.n_fresh);
            for i in 0..plan.n_fresh {
                let mut rng = stream(seed, Domain::Rollout, step as u64, plan.prompt_id as u64, i as u64);
                // Standard slots first, hinted slots after them.
                let hinted = i >= plan.n_fresh - plan.n_hinted;
                let hint = if hinted { plan.hint.as_ref() } else { None };
                out.push(rollout(policy, prompt, hint, plan.budget.length_budget, step, &mut rng)?);
            }
            Ok(out)
        })
        .collect();

    let mut groups = Vec::with_capacity(plans.len());
    for (plan, fresh) in plans.into_iter().zip(fresh) {
        let fresh = fresh?;
        let prompt = &world.prompts[plan.prompt_id];
        for r in &fresh {
            buffer.push(BufferEntry {
                prompt_id: plan.prompt_id,
                rollout: r.clone(),
            })?;
        }
        let mut rollouts = fresh;
        let n_replay = plan.replayed.len();
        rollouts.extend(plan.replayed);
        let forced_lens: Vec<usize> = rollouts.iter().map(|r| r.forced_len(prompt)).collect();
        let t_max_group = rollouts.iter().map(|r| r.length).max().unwrap_or(1);
        let shaped_rewards: Vec<f64> = rollouts
            .iter()
            .map(|r| shape_reward(plan.tier, plan.d_hat, r.reward_f64(), r.length, t_max_group, config))
            .collect();
        let advantages = group_advantages(&shaped_rewards)?;
        groups.push(TrainGroup {
            prompt_id: plan.prompt_id,
            tier: plan.tier,
            d_hat: plan.d_hat,
            source: plan.source,
            n_fresh: rollouts.len() - n_replay,
            n_replay,
            n_hinted: plan.n_hinted,
            rollouts,
            forced_lens,
            shaped_rewards,
            advantages,
            eps_minus: plan.budget.eps_minus,
            eps_plus: plan.budget.eps_plus,
        });
    }
    Ok(groups)
}

/// Gradient of the objective with respect to the policy logits.
#[derive(Debug, Clone)]
pub struct PolicyGrad {
    pub shared: Vec<f64>,
    pub prompt: Vec<f64>,
}

impl PolicyGrad {
    fn zeros(policy: &ToyPolicy) -> Self {
        PolicyGrad {
            shared: vec![0.0; policy.shared_logits.len()],
            prompt: vec![0.0; policy.prompt_logits.as_ref().map_or(0, Vec::len)],
        }
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.shared.iter().map(|g| g * g).sum();
        let p: f64 = self.prompt.iter().map(|g| g * g).sum();
        (s + p).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub prompt_id: usize,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Full objective value (surrogate minus KL penalty).
    pub objective: f64,
    pub surrogate: f64,
    pub kl_penalty: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub per_group: Vec<GroupStats>,
}

struct TokenAccum {
    value: f64,
    kl_value: f64,
    ratio_sum: f64,
    ratio_count: usize,
    clipped: usize,
}

/// Evaluates the objective and accumulates its gradient for one group.
#[allow(clippy::too_many_arguments)]
fn accumulate_group(
    policy: &ToyPolicy,
    ref_policy: Option<&ToyPolicy>,
    group: &TrainGroup,
    beta_kl: f64,
    batch_weight: f64,
    grad: Option<&mut PolicyGrad>,
    step: usize,
) -> Result<(TokenAccum, GroupStats)> {
    let pid = group.prompt_id;
    let vocab = policy.vocab;
    let inv_temp = 1.0 / policy.temperature;
    let g_q = group.rollouts.len() as f64;
    let dists: Vec<_> = (0..policy.t_max)
        .map(|pos| policy.decode_distribution(pid, pos))
        .collect();
    let ref_dists: Option<Vec<_>> = ref_policy.map(|rp| {
        (0..rp.t_max)
            .map(|pos| rp.decode_distribution(pid, pos))
            .collect()
    });
    // Exact KL(pi || pi_ref) per position; computed whenever a reference is
    // available so it can be logged even at beta = 0.
    let kls: Vec<f64> = match &ref_dists {
        Some(rd) => (0..policy.t_max)
            .map(|pos| {
                let d = &dists[pos];
                let r = &rd[pos];
                (0..vocab)
                    .map(|v| d.probs[v] * (d.log_probs[v] - r.log_probs[v]))
                    .sum()
            })
            .collect(),
        None => vec![0.0; policy.t_max],
    };
    let track_kl = ref_dists.is_some();

    let mut acc = TokenAccum {
        value: 0.0,
        kl_value: 0.0,
        ratio_sum: 0.0,
        ratio_count: 0,
        clipped: 0,
    };
    let mut grad = grad;
    let mut kl_weight_by_pos = vec![0.0; policy.t_max];
    for (i, r) in group.rollouts.iter().enumerate() {
        let adv = group.advantages[i];
        let forced = group.forced_lens[i];
        let token_weight = batch_weight / (g_q * r.length as f64);
        for (pos, &tok) in r.tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::Data(format!(
                    "token {tok} out of vocab in group for prompt {pid}"
                )));
            }
            if track_kl {
                acc.kl_value += token_weight * kls[pos];
                kl_weight_by_pos[pos] += token_weight;
            }
            if pos < forced {
                // Forced hint position: ratio is 1 under both policies.
                acc.value += token_weight * adv;
                continue;
            }
            let dist = &dists[pos];
            let log_ratio = dist.log_probs[tok] - r.behavior_logprobs[pos];
            let ratio = log_ratio.exp();
            acc.ratio_sum += ratio;
            acc.ratio_count += 1;
            let clipped_ratio = ratio.clamp(1.0 - group.eps_minus, 1.0 + group.eps_plus);
            let unclipped = ratio * adv;
            let clipped = clipped_ratio * adv;
            if unclipped <= clipped {
                acc.value += token_weight * unclipped;
                if let Some(g) = grad.as_deref_mut() {
                    // d(ratio * A)/d logit_u = A * ratio * (1[u=tok] - p_u) / T.
                    let coeff = token_weight * adv * ratio * inv_temp;
                    if coeff != 0.0 {
                        for u in 0..vocab {
                            let delta = f64::from(u == tok) - dist.probs[u];
                            let g_u = coeff * delta;
                            g.shared[pos * vocab + u] += g_u;
                            if !g.prompt.is_empty() {
                                g.prompt[(pid * policy.t_max + pos) * vocab + u] += g_u;
                            }
                        }
                    }
                }
            } else {
                // The clipped branch is selected strictly; ratio sits outside
                // the clip range, so its derivative is zero.
                acc.value += token_weight * clipped;
                acc.clipped += 1;
            }
        }
    }
    // KL gradient: dKL/d logit_u = p_u ((log p_u - log ref_u) - KL) / T.
    if beta_kl > 0.0 {
        if let Some(g) = grad.as_deref_mut() {
            let rd = ref_dists.as_ref().expect("ref policy required for KL");
            for pos in 0..policy.t_max {
                let w = kl_weight_by_pos[pos];
                if w == 0.0 {
                    continue;
                }
                let d = &dists[pos];
                for u in 0..vocab {
                    let dkl = d.probs[u] * ((d.log_probs[u] - rd[pos].log_probs[u]) - kls[pos]) * inv_temp;
                    let g_u = -beta_kl * w * dkl;
                    g.shared[pos * vocab + u] += g_u;
                    if !g.prompt.is_empty() {
                        g.prompt[(pid * policy.t_max + pos) * vocab + u] += g_u;
                    }
                }
            }
        }
    }
    if !acc.value.is_finite() || !acc.kl_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            prompt_id: pid,
            step,
        });
    }
    let tokens: usize = group.rollouts.iter().map(|r| r.length).sum();
    let stats = GroupStats {
        prompt_id: pid,
        mean_ratio: if acc.ratio_count > 0 {
            acc.ratio_sum / acc.ratio_count as f64
        } else {
            1.0
        },
        clip_fraction: if tokens > 0 {
            acc.clipped as f64 / tokens as f64
        } else {
            0.0
        },
        // KL averaged the same way the objective averages it within a group.
        kl: acc.kl_value / batch_weight,
    };
    Ok((acc, stats))
}

/// Objective value alone (used by the finite-difference oracle in tests).
pub fn objective_value(
    policy: &ToyPolicy,
    ref_policy: Option<&ToyPolicy>,
    groups: &[TrainGroup],
    config: &TierConfig,
) -> Result<f64> {
    let (value, _, _) = evaluate(policy, ref_policy, groups, config, false, 0)?;
    Ok(value)
}

/// Objective value and analytic gradient.
pub fn grpo_gradient(
    policy: &ToyPolicy,
    ref_policy: Option<&ToyPolicy>,
    groups: &[TrainGroup],
    config: &TierConfig,
) -> Result<(f64, PolicyGrad, StepStats)> {
    let (value, grad, stats) = evaluate(policy, ref_policy, groups, config, true, 0)?;
    Ok((value, grad.expect("gradient requested"), stats))
}

fn evaluate(
    policy: &ToyPolicy,
    ref_policy: Option<&ToyPolicy>,
    groups: &[TrainGroup],
    config: &TierConfig,
    want_grad: bool,
    step: usize,
) -> Result<(f64, Option<PolicyGrad>, StepStats)> {
    if groups.is_empty() {
        return Err(Error::Grouping("empty batch".to_string()));
    }
    if config.beta_kl > 0.0 && ref_policy.is_none() {
        return Err(Error::Data("beta_kl > 0 requires a reference policy".to_string()));
    }
    let batch_weight = 1.0 / groups.len() as f64;
    let mut grad = want_grad.then(|| PolicyGrad::zeros(policy));
    let mut surrogate = 0.0;
    let mut kl_penalty = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    let mut clipped = 0usize;
    let mut token_count = 0usize;
    let mut per_group = Vec::with_capacity(groups.len());
    for group in groups {
        let (acc, stats) = accumulate_group(
            policy,
            ref_policy,
            group,
            config.beta_kl,
            batch_weight,
            grad.as_mut(),
            step,
        )?;
        surrogate += acc.value;
        kl_penalty += config.beta_kl * acc.kl_value;
        ratio_sum += acc.ratio_sum;
        ratio_count += acc.ratio_count;
        clipped += acc.clipped;
        token_count += group.rollouts.iter().map(|r| r.length).sum::<usize>();
        per_group.push(stats);
    }
    let value = surrogate - kl_penalty;
    let stats = StepStats {
        objective: value,
        surrogate,
        kl_penalty,
        mean_ratio: if ratio_count > 0 {
            ratio_sum / ratio_count as f64
        } else {
            1.0
        },
        clip_fraction: if token_count > 0 {
            clipped as f64 / token_count as f64
        } else {
            0.0
        },
        grad_norm: grad.as_ref().map_or(0.0, PolicyGrad::norm),
        per_group,
    };
    Ok((value, grad, stats))
}

/// One gradient-ascent step on shared and per-prompt logits; bumps the
/// policy snapshot.
pub fn grpo_step(
    policy: &mut ToyPolicy,
    ref_policy: Option<&ToyPolicy>,
    groups: &[TrainGroup],
    config: &TierConfig,
    step: usize,
) -> Result<StepStats> {
    let (_, grad, stats) = evaluate(policy, ref_policy, groups, config, true, step)?;
    let grad = grad.expect("gradient requested");
    for (theta, g) in policy.shared_logits.iter_mut().zip(&grad.shared) {
        *theta += config.lr * g;
    }
    if let Some(pl) = policy.prompt_logits.as_mut() {
        for (theta, g) in pl.iter_mut().zip(&grad.prompt) {
            *theta += config.lr * g;
        }
    }
    policy.bump_snapshot();
    Ok(stats)
}

/// Convenience for constructing rollout groups directly in tests and the
/// bound checker.
pub fn assemble_group(
    prompt: &PromptSpec,
    tier: Tier,
    d_hat: f64,
    rollouts: Vec<Rollout>,
    eps_minus: f64,
    eps_plus: f64,
    config: &TierConfig,
) -> Result<TrainGroup> {
    let t_max_group = rollouts.iter().map(|r| r.length).max().unwrap_or(1);
    let shaped: Vec<f64> = rollouts
        .iter()
        .map(|r| shape_reward(tier, d_hat, r.reward_f64(), r.length, t_max_group, config))
        .collect();
    let advantages = group_advantages(&shaped)?;
    let forced_lens = rollouts.iter().map(|r| r.forced_len(prompt)).collect();
    Ok(TrainGroup {
        prompt_id: prompt.id,
        tier,
        d_hat,
        source: EstimateSource::Snis,
        n_fresh: rollouts.len(),
        n_replay: 0,
        n_hinted: 0,
        rollouts,
        forced_lens,
        shaped_rewards: shaped,
        advantages,
        eps_minus,
        eps_plus,
    })
}

/// Fresh on-policy rollouts for a prompt (used by tests and the harness).
pub fn fresh_rollouts(
    policy: &ToyPolicy,
    prompt: &PromptSpec,
    n: usize,
    max_len: usize,
    step: usize,
    seed: u64,
    domain: Domain,
) -> Vec<Rollout> {
    (0..n)
        .map(|i| {
            let mut rng: ChaCha8Rng =
                stream(seed, domain, step as u64, prompt.id as u64, i as u64);
            rollout(policy, prompt, None, max_len, step, &mut rng)
                .expect("unhinted rollout cannot fail")
        })
        .collect()
}
