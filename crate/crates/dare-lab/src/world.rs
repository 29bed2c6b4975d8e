//! Synthetic task universe.
//!
//! A prompt is a target token sequence; a rollout succeeds when it reaches the
//! full target as its prefix (tokens emitted after the target, before EOS, do
//! not affect correctness — they only cost length). Because the policy is
//! tabular over (position, token), the failure probability of each prompt is
//! exactly computable by enumerating terminating sequences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ToyPolicy;
use crate::streams::{stream, Domain};

pub const N_FAMILIES: usize = 3;

/// Default cap on V^T_max for exact enumeration.
pub const DEFAULT_ENUM_CAP: u64 = 1_000_000;

/// Monte Carlo sample count used when enumeration is infeasible.
pub const DEFAULT_MC_SAMPLES: usize = 20_000;

/// One synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: usize,
    pub target: Vec<usize>,
    /// Unit-normalized feature vector: token histogram, relative length, family one-hot.
    pub features: Vec<f64>,
    /// Latent difficulty family; used only for generation and reporting.
    pub group_label: usize,
}

impl PromptSpec {
    pub fn target_len(&self) -> usize {
        self.target.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub prompts: Vec<PromptSpec>,
    pub reference_ids: Vec<usize>,
    pub vocab: usize,
    pub t_max: usize,
    pub eos_token: Option<usize>,
    pub master_seed: u64,
}

impl World {
    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt(&self, id: usize) -> Result<&PromptSpec> {
        self.prompts.get(id).ok_or(Error::UnknownPrompt(id))
    }

    pub fn feature_dim(&self) -> usize {
        self.vocab + 1 + N_FAMILIES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_prompts: usize,
    pub vocab: usize,
    pub t_max: usize,
    pub n_reference: usize,
    pub family_weights: [f64; 3],
    pub eos_enabled: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_prompts: 64,
            vocab: 6,
            t_max: 7,
            n_reference: 8,
            family_weights: [1.0, 1.0, 1.0],
            eos_enabled: true,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts < 8 {
            return Err(Error::config("n_prompts", "must be >= 8"));
        }
        if !(2..=16).contains(&self.vocab) {
            return Err(Error::config("vocab", "must be in [2, 16]"));
        }
        if !(2..=12).contains(&self.t_max) {
            return Err(Error::config("t_max", "must be in [2, 12]"));
        }
        if self.n_reference == 0 || self.n_reference > self.n_prompts {
            return Err(Error::config("n_reference", "must be in [1, n_prompts]"));
        }
        if self.family_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::config("family_weights", "must be non-negative"));
        }
        if self.family_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("family_weights", "must have positive sum"));
        }
        Ok(())
    }

    /// Tokens a target may use (EOS, when enabled, is reserved).
    pub fn usable_tokens(&self) -> usize {
        if self.eos_enabled {
            self.vocab - 1
        } else {
            self.vocab
        }
    }
}

fn draw_family(weights: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let sum: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * sum;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    2
}

/// Target length range per family, clamped to the world's usable range.
fn family_len_range(family: usize, l_max: usize) -> (usize, usize) {
    let (lo, hi) = match family {
        0 => (1, 2),
        1 => (2, 4),
        _ => (3, 6),
    };
    (lo.min(l_max), hi.min(l_max))
}

/// Builds the deterministic prompt universe for a config.
pub fn make_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let usable = config.usable_tokens();
    if usable == 0 {
        return Err(Error::config("vocab", "no usable tokens besides EOS"));
    }
    // Longest reachable target: one slot is kept for EOS in variable-length mode.
    let l_max = if config.eos_enabled {
        config.t_max - 1
    } else {
        config.t_max
    };
    let mut prompts = Vec::with_capacity(config.n_prompts);
    for id in 0..config.n_prompts {
        let mut rng = stream(config.seed, Domain::WorldGen, 0, id as u64, 0);
        let family = draw_family(&config.family_weights, &mut rng);
        let (lo, hi) = family_len_range(family, l_max);
        let len = rng.random_range(lo..=hi);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..usable)).collect();
        let features = build_features(&target, config.vocab, config.t_max, family);
        prompts.push(PromptSpec {
            id,
            target,
            features,
            group_label: family,
        });
    }
    // Reference subset, drawn without replacement from its own stream.
    let mut ref_rng = stream(config.seed, Domain::WorldGen, 1, 0, 0);
    let mut ids: Vec<usize> = (0..config.n_prompts).collect();
    let mut reference_ids = Vec::with_capacity(config.n_reference);
    for _ in 0..config.n_reference {
        let k = ref_rng.random_range(0..ids.len());
        reference_ids.push(ids.swap_remove(k));
    }
    reference_ids.sort_unstable();
    Ok(World {
        prompts,
        reference_ids,
        vocab: config.vocab,
        t_max: config.t_max,
        eos_token: if config.eos_enabled {
            Some(config.vocab - 1)
        } else {
            None
        },
        master_seed: config.seed,
    })
}

fn build_features(target: &[usize], vocab: usize, t_max: usize, family: usize) -> Vec<f64> {
    let mut f = vec![0.0; vocab + 1 + N_FAMILIES];
    for &tok in target {
        f[tok] += 1.0;
    }
    let len = target.len() as f64;
    for x in f.iter_mut().take(vocab) {
        *x /= len;
    }
    f[vocab] = len / t_max as f64;
    f[vocab + 1 + family] = 1.0;
    let norm: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in f.iter_mut() {
        *x /= norm;
    }
    f
}

/// Boost applied to target-token logits at policy init, by family.
const FAMILY_BOOST: [(f64, f64); 3] = [(4.0, 0.4), (2.6, 0.4), (0.9, 0.5)];
/// Standard deviation of the per-(prompt, position, token) logit jitter.
const INIT_JITTER: f64 = 1.0;

/// Initial policy for a world: per-prompt logits carry a family-dependent
/// boost along the target trajectory plus dense jitter, so that families
/// start at distinct difficulty levels and greedy decoding starts wrong on
/// a nontrivial fraction of prompts.
pub fn init_policy(world: &World) -> ToyPolicy {
    let mut policy = ToyPolicy::zeros(world.n_prompts(), world.t_max, world.vocab, world.eos_token);
    let normal = Normal::new(0.0, INIT_JITTER).expect("valid normal");
    let table = policy.prompt_logits.as_mut().expect("per-prompt table enabled");
    for prompt in &world.prompts {
        let mut rng = stream(world.master_seed, Domain::PolicyInit, 0, prompt.id as u64, 0);
        let (base, spread) = FAMILY_BOOST[prompt.group_label.min(2)];
        let boost = base + (rng.random::<f64>() * 2.0 - 1.0) * spread;
        for pos in 0..world.t_max {
            for v in 0..world.vocab {
                let idx = (prompt.id * world.t_max + pos) * world.vocab + v;
                table[idx] = normal.sample(&mut rng);
            }
        }
        for (pos, &tok) in prompt.target.iter().enumerate() {
            let idx = (prompt.id * world.t_max + pos) * world.vocab + tok;
            table[idx] += boost;
        }
    }
    policy.assert_finite();
    policy
}

/// One sampled (or forced-prefix) response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// |o_i|: tokens generated, including EOS if emitted.
    pub length: usize,
    pub reward: u8,
    /// Per-token log-probability under the generating decode distribution;
    /// forced hint positions contribute exactly 0.
    pub behavior_logprobs: Vec<f64>,
    pub behavior_snapshot: u64,
    pub hinted: bool,
    pub step: usize,
}

impl Rollout {
    pub fn reward_f64(&self) -> f64 {
        self.reward as f64
    }

    /// Number of forced hint positions, derivable from the prompt's target.
    pub fn forced_len(&self, prompt: &PromptSpec) -> usize {
        if self.hinted {
            prompt.target_len().div_ceil(2).min(self.length)
        } else {
            0
        }
    }
}

/// Success rule: the emitted tokens (before EOS) must reach the full target
/// as their prefix.
pub fn sequence_reward(tokens: &[usize], eos_token: Option<usize>, target: &[usize]) -> u8 {
    let emitted: &[usize] = match eos_token.and_then(|e| tokens.iter().position(|&t| t == e)) {
        Some(p) => &tokens[..p],
        None => tokens,
    };
    u8::from(emitted.len() >= target.len() && emitted[..target.len()] == *target)
}

fn sample_token(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (v, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return v;
        }
    }
    probs.len() - 1
}

/// Samples one rollout. `hint`, when present, forces the first
/// ceil(L_q/2) tokens to the hint trajectory's tokens with log-prob 0.
/// Generation stops at EOS or after `max_len` tokens (the tier's length
/// budget, at most T_max).
pub fn rollout(
    policy: &ToyPolicy,
    prompt: &PromptSpec,
    hint: Option<&Rollout>,
    max_len: usize,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let budget = max_len.clamp(1, policy.t_max);
    let forced = match hint {
        Some(h) => {
            let need = prompt.target_len().div_ceil(2);
            if h.tokens.len() < need {
                return Err(Error::HintFormat {
                    hint_len: h.tokens.len(),
                    forced: need,
                });
            }
            need.min(budget)
        }
        None => 0,
    };
    let mut tokens = Vec::with_capacity(budget);
    let mut logprobs = Vec::with_capacity(budget);
    for pos in 0..budget {
        let (tok, lp) = if pos < forced {
            (hint.expect("forced implies hint").tokens[pos], 0.0)
        } else {
            let dist = policy.decode_distribution(prompt.id, pos);
            let tok = sample_token(&dist.probs, rng);
            (tok, dist.log_probs[tok])
        };
        tokens.push(tok);
        logprobs.push(lp);
        if policy.eos_token == Some(tok) {
            break;
        }
    }
    let reward = sequence_reward(&tokens, policy.eos_token, &prompt.target);
    Ok(Rollout {
        length: tokens.len(),
        reward,
        behavior_logprobs: logprobs,
        behavior_snapshot: policy.snapshot_id,
        hinted: forced > 0,
        step,
        tokens,
    })
}

/// Argmax decoding; used for held-out evaluation.
pub fn greedy_rollout(policy: &ToyPolicy, prompt: &PromptSpec, step: usize) -> Rollout {
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    for pos in 0..policy.t_max {
        let dist = policy.decode_distribution(prompt.id, pos);
        let tok = dist.argmax();
        tokens.push(tok);
        logprobs.push(dist.log_probs[tok]);
        if policy.eos_token == Some(tok) {
            break;
        }
    }
    let reward = sequence_reward(&tokens, policy.eos_token, &prompt.target);
    Rollout {
        length: tokens.len(),
        reward,
        behavior_logprobs: logprobs,
        behavior_snapshot: policy.snapshot_id,
        hinted: false,
        step,
        tokens,
    }
}

/// Exact (or flagged Monte Carlo) failure probability of the current policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueDifficulty {
    pub value: f64,
    /// Present iff the value comes from the Monte Carlo fallback.
    pub mc_stderr: Option<f64>,
}

impl TrueDifficulty {
    pub fn is_exact(&self) -> bool {
        self.mc_stderr.is_none()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrueDifficultyOptions {
    pub enum_cap: u64,
    pub mc_samples: usize,
}

impl Default for TrueDifficultyOptions {
    fn default() -> Self {
        TrueDifficultyOptions {
            enum_cap: DEFAULT_ENUM_CAP,
            mc_samples: DEFAULT_MC_SAMPLES,
        }
    }
}

/// d_theta(q): exact failure probability under the current decoding and
/// stopping rules, by enumeration of all terminating sequences. Falls back
/// to Monte Carlo (with reported standard error) when V^T_max exceeds the cap.
pub fn true_difficulty(policy: &ToyPolicy, prompt: &PromptSpec, rng: &mut ChaCha8Rng) -> TrueDifficulty {
    true_difficulty_opts(policy, prompt, TrueDifficultyOptions::default(), rng)
}

pub fn true_difficulty_opts(
    policy: &ToyPolicy,
    prompt: &PromptSpec,
    opts: TrueDifficultyOptions,
    rng: &mut ChaCha8Rng,
) -> TrueDifficulty {
    let mut paths: u128 = 1;
    for _ in 0..policy.t_max {
        paths = paths.saturating_mul(policy.vocab as u128);
    }
    if paths <= opts.enum_cap as u128 {
        let (success, mass) = enumerate_success(policy, prompt);
        debug_assert!((mass - 1.0).abs() < 1e-9, "terminal mass {mass}");
        TrueDifficulty {
            value: (1.0 - success).clamp(0.0, 1.0),
            mc_stderr: None,
        }
    } else {
        let n = opts.mc_samples.max(1);
        let mut failures = 0usize;
        for _ in 0..n {
            let r = rollout(policy, prompt, None, policy.t_max, 0, rng)
                .expect("unhinted rollout cannot fail");
            if r.reward == 0 {
                failures += 1;
            }
        }
        let p = failures as f64 / n as f64;
        TrueDifficulty {
            value: p,
            mc_stderr: Some((p * (1.0 - p) / n as f64).sqrt()),
        }
    }
}

/// Walks the decode tree over all terminating sequences, accumulating the
/// success probability and the total terminal mass.
fn enumerate_success(policy: &ToyPolicy, prompt: &PromptSpec) -> (f64, f64) {
    let dists: Vec<Vec<f64>> = (0..policy.t_max)
        .map(|pos| policy.decode_distribution(prompt.id, pos).probs)
        .collect();
    let target = &prompt.target;
    let eos = policy.eos_token;
    let mut success = 0.0;
    let mut mass = 0.0;
    // matched: the prefix so far agrees with target on its first min(depth, L) tokens.
    fn recurse(
        dists: &[Vec<f64>],
        target: &[usize],
        eos: Option<usize>,
        t_max: usize,
        pos: usize,
        prob: f64,
        matched: bool,
        success: &mut f64,
        mass: &mut f64,
    ) {
        for (v, &p_tok) in dists[pos].iter().enumerate() {
            let p = prob * p_tok;
            if p == 0.0 {
                continue;
            }
            if eos == Some(v) {
                // Terminal: `pos` tokens emitted before EOS.
                *mass += p;
                if matched && pos >= target.len() {
                    *success += p;
                }
                continue;
            }
            let next_matched = matched && (pos >= target.len() || v == target[pos]);
            if pos + 1 == t_max {
                *mass += p;
                if next_matched && pos + 1 >= target.len() {
                    *success += p;
                }
            } else {
                recurse(
                    dists,
                    target,
                    eos,
                    t_max,
                    pos + 1,
                    p,
                    next_matched,
                    success,
                    mass,
                );
            }
        }
    }
    recurse(
        &dists,
        target,
        eos,
        policy.t_max,
        0,
        1.0,
        true,
        &mut success,
        &mut mass,
    );
    (success, mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::root_stream;

    fn uniform_policy(world: &World) -> ToyPolicy {
        ToyPolicy::zeros(world.n_prompts(), world.t_max, world.vocab, world.eos_token)
    }

    fn tiny_config() -> WorldConfig {
        WorldConfig {
            n_prompts: 16,
            vocab: 2,
            t_max: 2,
            n_reference: 4,
            family_weights: [1.0, 1.0, 1.0],
            eos_enabled: false,
            seed: 7,
        }
    }

    #[test]
    fn world_is_deterministic_for_a_seed() {
        let a = make_world(&tiny_config()).unwrap();
        let b = make_world(&tiny_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_policy_difficulty_is_counting_argument() {
        // V=2, T_max=2, uniform policy: every prompt has difficulty 1 - 2^{-L_q}.
        let world = make_world(&tiny_config()).unwrap();
        let policy = uniform_policy(&world);
        let mut rng = root_stream(0, Domain::WorldGen);
        let mut lengths_seen = std::collections::BTreeSet::new();
        for prompt in &world.prompts {
            let d = true_difficulty(&policy, prompt, &mut rng);
            assert!(d.is_exact());
            let expected = 1.0 - 0.5f64.powi(prompt.target_len() as i32);
            assert!(
                (d.value - expected).abs() < 1e-12,
                "prompt {} len {}: {} vs {}",
                prompt.id,
                prompt.target_len(),
                d.value,
                expected
            );
            lengths_seen.insert(prompt.target_len());
        }
        // The check is only meaningful if lengths actually vary.
        assert!(lengths_seen.len() > 1);
    }

    #[test]
    fn degenerate_mixture_puts_all_prompts_in_family_zero() {
        let config = WorldConfig {
            family_weights: [1.0, 0.0, 0.0],
            ..tiny_config()
        };
        let world = make_world(&config).unwrap();
        assert!(world.prompts.iter().all(|p| p.group_label == 0));
    }

    #[test]
    fn invalid_ranges_name_the_offending_key() {
        let bad = WorldConfig {
            vocab: 40,
            ..tiny_config()
        };
        match make_world(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "vocab"),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = WorldConfig {
            n_prompts: 3,
            ..tiny_config()
        };
        assert!(matches!(make_world(&bad), Err(Error::Config { key, .. }) if key == "n_prompts"));
    }

    #[test]
    fn prompt_invariants_hold() {
        let config = WorldConfig {
            n_prompts: 48,
            vocab: 6,
            t_max: 7,
            n_reference: 8,
            family_weights: [1.0, 1.0, 1.0],
            eos_enabled: true,
            seed: 3,
        };
        let world = make_world(&config).unwrap();
        assert_eq!(world.reference_ids.len(), 8);
        for prompt in &world.prompts {
            assert!(!prompt.target.is_empty());
            assert!(prompt.target.iter().all(|&t| t < config.vocab - 1));
            let norm: f64 = prompt.features.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rollout_stream_is_reproducible() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let policy = init_policy(&world);
        let p = &world.prompts[5];
        let mut a = stream(9, Domain::Rollout, 4, p.id as u64, 1);
        let mut b = stream(9, Domain::Rollout, 4, p.id as u64, 1);
        let ra = rollout(&policy, p, None, world.t_max, 4, &mut a).unwrap();
        let rb = rollout(&policy, p, None, world.t_max, 4, &mut b).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn argmax_decoding_of_target_favoring_policy_scores_one() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let mut policy = uniform_policy(&world);
        policy.temperature = 1e-7;
        let prompt = &world.prompts[0];
        // Favor the target at every step.
        for (pos, &tok) in prompt.target.iter().enumerate() {
            let idx = policy.prompt_idx(prompt.id, pos, tok);
            policy.prompt_logits.as_mut().unwrap()[idx] = 5.0;
        }
        let mut rng = root_stream(1, Domain::Rollout);
        let r = rollout(&policy, prompt, None, world.t_max, 0, &mut rng).unwrap();
        assert_eq!(r.reward, 1);
        assert_eq!(&r.tokens[..prompt.target_len()], &prompt.target[..]);
    }

    #[test]
    fn behavior_logprobs_match_decode_probabilities() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let policy = init_policy(&world);
        for (i, prompt) in world.prompts.iter().take(8).enumerate() {
            let mut rng = stream(2, Domain::Rollout, 0, prompt.id as u64, i as u64);
            let r = rollout(&policy, prompt, None, world.t_max, 0, &mut rng).unwrap();
            assert_eq!(r.length, r.tokens.len());
            assert_eq!(r.length, r.behavior_logprobs.len());
            assert!(r.behavior_logprobs.iter().all(|&lp| lp <= 0.0));
            let stored: f64 = r.behavior_logprobs.iter().sum();
            let mut recomputed = 0.0;
            for (pos, &tok) in r.tokens.iter().enumerate() {
                recomputed += policy.decode_distribution(prompt.id, pos).probs[tok].ln();
            }
            let rel = (stored.exp() - recomputed.exp()).abs() / recomputed.exp().max(1e-300);
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn hint_forces_prefix_with_zero_logprob() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let policy = init_policy(&world);
        let prompt = &world.prompts[3];
        let mut rng = root_stream(5, Domain::Rollout);
        // A successful trajectory to borrow the prefix from.
        let hint = Rollout {
            tokens: prompt.target.clone(),
            length: prompt.target_len(),
            reward: 1,
            behavior_logprobs: vec![-0.1; prompt.target_len()],
            behavior_snapshot: 0,
            hinted: false,
            step: 0,
        };
        let r = rollout(&policy, prompt, Some(&hint), world.t_max, 1, &mut rng).unwrap();
        let forced = prompt.target_len().div_ceil(2);
        assert!(r.hinted);
        assert_eq!(&r.tokens[..forced], &prompt.target[..forced]);
        assert!(r.behavior_logprobs[..forced].iter().all(|&lp| lp == 0.0));

        let short_hint = Rollout {
            tokens: vec![],
            length: 0,
            reward: 1,
            behavior_logprobs: vec![],
            behavior_snapshot: 0,
            hinted: false,
            step: 0,
        };
        assert!(matches!(
            rollout(&policy, prompt, Some(&short_hint), world.t_max, 1, &mut rng),
            Err(Error::HintFormat { .. })
        ));
    }

    #[test]
    fn empirical_success_rate_agrees_with_enumeration() {
        // Monte Carlo vs the enumeration oracle, 3 sigma binomial.
        let world = make_world(&WorldConfig {
            n_prompts: 8,
            vocab: 4,
            t_max: 4,
            n_reference: 2,
            family_weights: [1.0, 1.0, 1.0],
            eos_enabled: true,
            seed: 11,
        })
        .unwrap();
        let policy = init_policy(&world);
        let n = 10_000;
        for prompt in world.prompts.iter().take(4) {
            let mut oracle_rng = root_stream(0, Domain::WorldGen);
            let d = true_difficulty(&policy, prompt, &mut oracle_rng);
            assert!(d.is_exact());
            let mut failures = 0;
            for i in 0..n {
                let mut rng = stream(13, Domain::Rollout, 0, prompt.id as u64, i as u64);
                let r = rollout(&policy, prompt, None, world.t_max, 0, &mut rng).unwrap();
                failures += (r.reward == 0) as usize;
            }
            let p_hat = failures as f64 / n as f64;
            let sigma = (d.value * (1.0 - d.value) / n as f64).sqrt().max(1e-9);
            assert!(
                (p_hat - d.value).abs() <= 3.0 * sigma + 1e-9,
                "prompt {}: {} vs {} (sigma {})",
                prompt.id,
                p_hat,
                d.value,
                sigma
            );
        }
    }

    #[test]
    fn deterministic_policy_has_zero_difficulty() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let mut policy = uniform_policy(&world);
        policy.temperature = 1e-9;
        let prompt = &world.prompts[1];
        for (pos, &tok) in prompt.target.iter().enumerate() {
            let idx = policy.prompt_idx(prompt.id, pos, tok);
            policy.prompt_logits.as_mut().unwrap()[idx] = 3.0;
        }
        let mut rng = root_stream(0, Domain::WorldGen);
        let d = true_difficulty(&policy, prompt, &mut rng);
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn random_logits_match_monte_carlo_oracle() {
        // V=3, T_max=3, random logits, seed 11, 200k samples, 3 sigma.
        let config = WorldConfig {
            n_prompts: 8,
            vocab: 3,
            t_max: 3,
            n_reference: 2,
            family_weights: [1.0, 1.0, 1.0],
            eos_enabled: true,
            seed: 11,
        };
        let world = make_world(&config).unwrap();
        let policy = init_policy(&world);
        let prompt = &world.prompts[2];
        let mut rng = root_stream(0, Domain::WorldGen);
        let exact = true_difficulty(&policy, prompt, &mut rng);
        let n = 200_000;
        let mut failures = 0usize;
        for i in 0..n {
            let mut r = stream(17, Domain::Rollout, 0, prompt.id as u64, i as u64);
            let ro = rollout(&policy, prompt, None, world.t_max, 0, &mut r).unwrap();
            failures += (ro.reward == 0) as usize;
        }
        let p_hat = failures as f64 / n as f64;
        let sigma = (exact.value * (1.0 - exact.value) / n as f64).sqrt().max(1e-9);
        assert!((p_hat - exact.value).abs() <= 3.0 * sigma);
    }

    #[test]
    fn true_difficulty_is_shift_invariant() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let mut policy = init_policy(&world);
        let prompt = &world.prompts[4];
        let mut rng = root_stream(0, Domain::WorldGen);
        let before = true_difficulty(&policy, prompt, &mut rng);
        for v in 0..world.vocab {
            let idx = policy.shared_idx(2, v);
            policy.shared_logits[idx] += 17.5;
        }
        let after = true_difficulty(&policy, prompt, &mut rng);
        assert!((before.value - after.value).abs() < 1e-10);
    }

    #[test]
    fn temperature_increase_drives_difficulty_to_uniform_limit() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let prompt = &world.prompts[0];
        let mut values = Vec::new();
        for &t in &[0.5, 1.0, 2.0, 4.0, 8.0] {
            let mut policy = init_policy(&world);
            policy.temperature = t;
            let mut rng = root_stream(0, Domain::WorldGen);
            values.push(true_difficulty(&policy, prompt, &mut rng).value);
        }
        for w in values.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "not monotone: {values:?}");
        }
        let uniform_success = (world.vocab as f64).powi(-(prompt.target_len() as i32));
        let limit = 1.0 - uniform_success;
        assert!((values[values.len() - 1] - limit).abs() < 0.2);
        assert!(values[values.len() - 1] <= limit + 1e-12);
    }

    #[test]
    fn enumeration_cap_falls_back_to_flagged_monte_carlo() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let policy = init_policy(&world);
        let prompt = &world.prompts[0];
        let opts = TrueDifficultyOptions {
            enum_cap: 1,
            mc_samples: 4_000,
        };
        let mut rng = root_stream(23, Domain::WorldGen);
        let mc = true_difficulty_opts(&policy, prompt, opts, &mut rng);
        assert!(!mc.is_exact());
        let mut rng2 = root_stream(0, Domain::WorldGen);
        let exact = true_difficulty(&policy, prompt, &mut rng2);
        assert!((mc.value - exact.value).abs() <= 4.0 * mc.mc_stderr.unwrap().max(1e-3));
    }

    #[test]
    fn family_difficulties_are_ordered() {
        let world = make_world(&WorldConfig {
            n_prompts: 96,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap();
        let policy = init_policy(&world);
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        let mut rng = root_stream(0, Domain::WorldGen);
        for prompt in &world.prompts {
            let d = true_difficulty(&policy, prompt, &mut rng);
            sums[prompt.group_label] += d.value;
            counts[prompt.group_label] += 1;
        }
        let means: Vec<f64> = (0..3).map(|f| sums[f] / counts[f] as f64).collect();
        assert!(
            means[0] + 0.1 < means[1] && means[1] + 0.1 < means[2],
            "family means {means:?}"
        );
        assert!(means[0] < 0.35, "easy family too hard: {means:?}");
        assert!(means[2] > 0.7, "hard family too easy: {means:?}");
    }

    #[test]
    fn greedy_rollout_is_deterministic() {
        let world = make_world(&WorldConfig::default()).unwrap();
        let policy = init_policy(&world);
        let a = greedy_rollout(&policy, &world.prompts[2], 0);
        let b = greedy_rollout(&policy, &world.prompts[2], 0);
        assert_eq!(a, b);
    }
}
