//! Tabular softmax sequence policy.
//!
//! Logits are indexed by (position, token) with an optional per-prompt table
//! added on top of the shared one. The decode distribution at a state is
//! `softmax(logits / temperature)` over the whole vocabulary; rollouts sample
//! from it, and every stored or re-evaluated log-probability comes from the
//! same computation, never from raw logits.

use serde::{Deserialize, Serialize};

/// Below this temperature decoding switches to an explicit argmax branch.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

/// Decode distribution at one (prompt, position) state.
#[derive(Debug, Clone)]
pub struct DecodeDist {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl DecodeDist {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for v in 1..self.probs.len() {
            if self.probs[v] > self.probs[best] {
                best = v;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for &p in &self.probs {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }
}

/// Tabular softmax policy with shared and per-prompt logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub n_prompts: usize,
    pub t_max: usize,
    pub vocab: usize,
    /// Flattened [t_max, vocab].
    pub shared_logits: Vec<f64>,
    /// Flattened [n_prompts, t_max, vocab]; `None` disables the per-prompt table.
    pub prompt_logits: Option<Vec<f64>>,
    pub temperature: f64,
    pub eos_token: Option<usize>,
    /// Strictly increases on every parameter update; identifies behavior policies.
    pub snapshot_id: u64,
}

impl ToyPolicy {
    pub fn zeros(n_prompts: usize, t_max: usize, vocab: usize, eos_token: Option<usize>) -> Self {
        ToyPolicy {
            n_prompts,
            t_max,
            vocab,
            shared_logits: vec![0.0; t_max * vocab],
            prompt_logits: Some(vec![0.0; n_prompts * t_max * vocab]),
            temperature: 1.0,
            eos_token,
            snapshot_id: 0,
        }
    }

    #[inline]
    pub fn shared_idx(&self, pos: usize, v: usize) -> usize {
        pos * self.vocab + v
    }

    #[inline]
    pub fn prompt_idx(&self, prompt: usize, pos: usize, v: usize) -> usize {
        (prompt * self.t_max + pos) * self.vocab + v
    }

    /// Combined logit at (prompt, position, token).
    #[inline]
    pub fn logit(&self, prompt: usize, pos: usize, v: usize) -> f64 {
        let mut l = self.shared_logits[self.shared_idx(pos, v)];
        if let Some(pl) = &self.prompt_logits {
            l += pl[self.prompt_idx(prompt, pos, v)];
        }
        l
    }

    /// Decode distribution at (prompt, position): temperature softmax over the
    /// vocabulary, computed in log space. Temperatures below
    /// [`ARGMAX_TEMPERATURE`] return the argmax one-hot (ties to the lowest id).
    pub fn decode_distribution(&self, prompt: usize, pos: usize) -> DecodeDist {
        debug_assert!(pos < self.t_max, "position {pos} >= t_max {}", self.t_max);
        let v = self.vocab;
        let mut logits = Vec::with_capacity(v);
        for tok in 0..v {
            logits.push(self.logit(prompt, pos, tok));
        }
        if self.temperature < ARGMAX_TEMPERATURE {
            let mut best = 0;
            for tok in 1..v {
                if logits[tok] > logits[best] {
                    best = tok;
                }
            }
            let mut probs = vec![0.0; v];
            let mut log_probs = vec![f64::NEG_INFINITY; v];
            probs[best] = 1.0;
            log_probs[best] = 0.0;
            return DecodeDist { probs, log_probs };
        }
        let inv_t = 1.0 / self.temperature;
        let mut max = f64::NEG_INFINITY;
        for tok in 0..v {
            logits[tok] *= inv_t;
            if logits[tok] > max {
                max = logits[tok];
            }
        }
        let mut sum = 0.0;
        let mut probs = Vec::with_capacity(v);
        for tok in 0..v {
            let e = (logits[tok] - max).exp();
            probs.push(e);
            sum += e;
        }
        let log_sum = sum.ln();
        let mut log_probs = Vec::with_capacity(v);
        for tok in 0..v {
            log_probs.push(logits[tok] - max - log_sum);
            probs[tok] /= sum;
        }
        DecodeDist { probs, log_probs }
    }

    /// Marks a parameter update.
    pub fn bump_snapshot(&mut self) {
        self.snapshot_id += 1;
    }

    pub fn assert_finite(&self) {
        debug_assert!(self.shared_logits.iter().all(|x| x.is_finite()));
        if let Some(pl) = &self.prompt_logits {
            debug_assert!(pl.iter().all(|x| x.is_finite()));
        }
    }
}
