//! Prompt-wise FIFO replay buffer.
//!
//! Each prompt keeps its own bounded queue; a global capacity evicts from the
//! prompt whose newest entry is oldest, preserving the freshest per-prompt
//! coverage for SNIS estimation.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::Rollout;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub prompt_id: usize,
    pub rollout: Rollout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    per_prompt: BTreeMap<usize, VecDeque<BufferEntry>>,
    /// Monotone push counter; newest_seq tracks recency per prompt.
    push_counter: u64,
    newest_seq: BTreeMap<usize, u64>,
    n_prompts: usize,
    k_cap: usize,
    capacity: usize,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(n_prompts: usize, k_cap: usize, capacity: usize) -> Self {
        ReplayBuffer {
            per_prompt: BTreeMap::new(),
            push_counter: 0,
            newest_seq: BTreeMap::new(),
            n_prompts,
            k_cap: k_cap.max(1),
            capacity: capacity.max(1),
            size: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn k_cap(&self) -> usize {
        self.k_cap
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    /// Appends an entry; evicts the prompt's oldest past K_cap, then the
    /// globally least-recently-pushed prompt's oldest past the global cap.
    pub fn push(&mut self, entry: BufferEntry) -> Result<()> {
        if entry.prompt_id >= self.n_prompts {
            return Err(Error::UnknownPrompt(entry.prompt_id));
        }
        let pid = entry.prompt_id;
        self.push_counter += 1;
        self.newest_seq.insert(pid, self.push_counter);
        let queue = self.per_prompt.entry(pid).or_default();
        queue.push_back(entry);
        self.size += 1;
        if queue.len() > self.k_cap {
            queue.pop_front();
            self.size -= 1;
        }
        while self.size > self.capacity {
            let victim = self
                .newest_seq
                .iter()
                .filter(|(pid, _)| self.per_prompt.get(pid).is_some_and(|q| !q.is_empty()))
                .min_by_key(|(_, &seq)| seq)
                .map(|(&pid, _)| pid)
                .expect("non-empty buffer over capacity");
            let q = self.per_prompt.get_mut(&victim).expect("victim exists");
            q.pop_front();
            self.size -= 1;
            if q.is_empty() {
                self.per_prompt.remove(&victim);
                self.newest_seq.remove(&victim);
            }
        }
        Ok(())
    }

    /// Current queue for a prompt, oldest first. Unknown ids yield an empty list.
    pub fn entries(&self, prompt_id: usize) -> Vec<BufferEntry> {
        self.per_prompt
            .get(&prompt_id)
            .map(|q| q.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn queue_len(&self, prompt_id: usize) -> usize {
        self.per_prompt.get(&prompt_id).map_or(0, VecDeque::len)
    }

    /// Most recent buffered rollout with reward 1 for this prompt, if any.
    pub fn select_hint(&self, prompt_id: usize) -> Option<Rollout> {
        self.per_prompt.get(&prompt_id).and_then(|q| {
            q.iter()
                .rev()
                .find(|e| e.rollout.reward == 1)
                .map(|e| e.rollout.clone())
        })
    }

    /// Newest-first replay sample of up to `n` entries for a prompt.
    pub fn newest(&self, prompt_id: usize, n: usize) -> Vec<BufferEntry> {
        self.per_prompt
            .get(&prompt_id)
            .map(|q| q.iter().rev().take(n).cloned().collect())
            .unwrap_or_default()
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let file = SnapshotFile::from_buffer(self);
        let json = serde_json::to_string_pretty(&file).expect("buffer serializes");
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn restore(path: &Path) -> Result<ReplayBuffer> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: SnapshotFile = serde_json::from_str(&text).map_err(|e| {
            let offset = byte_offset(&text, e.line(), e.column());
            Error::Integrity {
                path: path.display().to_string(),
                offset,
                msg: e.to_string(),
            }
        })?;
        file.into_buffer().map_err(|msg| Error::Integrity {
            path: path.display().to_string(),
            offset: 0,
            msg,
        })
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Self-describing snapshot schema; array order in the file is queue order.
#[derive(Debug, Serialize, Deserialize)]
struct SnapshotFile {
    version: u32,
    k_cap: usize,
    c: usize,
    n_prompts: usize,
    prompts: Vec<SnapshotPrompt>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotPrompt {
    prompt_id: usize,
    entries: Vec<Rollout>,
}

impl SnapshotFile {
    fn from_buffer(buffer: &ReplayBuffer) -> Self {
        let prompts = buffer
            .per_prompt
            .iter()
            .map(|(&prompt_id, q)| SnapshotPrompt {
                prompt_id,
                entries: q.iter().map(|e| e.rollout.clone()).collect(),
            })
            .collect();
        SnapshotFile {
            version: SNAPSHOT_VERSION,
            k_cap: buffer.k_cap,
            c: buffer.capacity,
            n_prompts: buffer.n_prompts,
            prompts,
        }
    }

    fn into_buffer(self) -> std::result::Result<ReplayBuffer, String> {
        if self.version != SNAPSHOT_VERSION {
            return Err(format!("unsupported snapshot version {}", self.version));
        }
        let mut buffer = ReplayBuffer::new(self.n_prompts, self.k_cap, self.c);
        for prompt in self.prompts {
            if prompt.entries.len() > self.k_cap {
                return Err(format!(
                    "prompt {} holds {} entries, k_cap {}",
                    prompt.prompt_id,
                    prompt.entries.len(),
                    self.k_cap
                ));
            }
            let mut last_step = 0usize;
            for rollout in prompt.entries {
                if rollout.length != rollout.tokens.len()
                    || rollout.length != rollout.behavior_logprobs.len()
                {
                    return Err(format!("prompt {}: inconsistent lengths", prompt.prompt_id));
                }
                if rollout.step < last_step {
                    return Err(format!(
                        "prompt {}: steps not non-decreasing",
                        prompt.prompt_id
                    ));
                }
                last_step = rollout.step;
                buffer
                    .push(BufferEntry {
                        prompt_id: prompt.prompt_id,
                        rollout,
                    })
                    .map_err(|e| e.to_string())?;
            }
        }
        if buffer.size > buffer.capacity {
            return Err("entries exceed global capacity".to_string());
        }
        Ok(buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(pid: usize, step: usize, reward: u8) -> BufferEntry {
        BufferEntry {
            prompt_id: pid,
            rollout: Rollout {
                tokens: vec![0, 1],
                length: 2,
                reward,
                behavior_logprobs: vec![-0.5, -0.25],
                behavior_snapshot: step as u64,
                hinted: false,
                step,
            },
        }
    }

    #[test]
    fn per_prompt_fifo_eviction() {
        let mut b = ReplayBuffer::new(4, 2, 100);
        for step in 0..3 {
            b.push(entry(0, step, 0)).unwrap();
        }
        let q = b.entries(0);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].rollout.step, 1);
        assert_eq!(q[1].rollout.step, 2);
    }

    #[test]
    fn global_cap_evicts_least_recently_pushed_prompt() {
        let mut b = ReplayBuffer::new(4, 2, 2);
        b.push(entry(0, 0, 0)).unwrap();
        b.push(entry(0, 1, 0)).unwrap();
        b.push(entry(1, 2, 0)).unwrap();
        assert_eq!(b.queue_len(0), 1);
        assert_eq!(b.queue_len(1), 1);
        assert_eq!(b.entries(0)[0].rollout.step, 1, "oldest of p0 evicted");
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn push_then_get_round_trips() {
        let mut b = ReplayBuffer::new(4, 4, 100);
        let e = entry(2, 7, 1);
        b.push(e.clone()).unwrap();
        assert_eq!(b.entries(2), vec![e]);
    }

    #[test]
    fn unknown_prompt_is_rejected() {
        let mut b = ReplayBuffer::new(4, 4, 100);
        assert!(matches!(
            b.push(entry(9, 0, 0)),
            Err(Error::UnknownPrompt(9))
        ));
    }

    #[test]
    fn entries_for_unknown_prompt_is_empty() {
        let b = ReplayBuffer::new(4, 4, 100);
        assert!(b.entries(3).is_empty());
        assert!(b.entries(99).is_empty());
    }

    #[test]
    fn select_hint_returns_newest_success() {
        let mut b = ReplayBuffer::new(4, 8, 100);
        b.push(entry(0, 0, 1)).unwrap();
        b.push(entry(0, 1, 0)).unwrap();
        b.push(entry(0, 2, 1)).unwrap();
        let hint = b.select_hint(0).unwrap();
        assert_eq!(hint.step, 2);
        assert_eq!(hint.reward, 1);

        let mut only_failures = ReplayBuffer::new(4, 8, 100);
        only_failures.push(entry(1, 0, 0)).unwrap();
        only_failures.push(entry(1, 1, 0)).unwrap();
        assert!(only_failures.select_hint(1).is_none());
        assert!(only_failures.select_hint(0).is_none());
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.json");
        let mut b = ReplayBuffer::new(4, 2, 3);
        for step in 0..5 {
            b.push(entry(step % 3, step, (step % 2) as u8)).unwrap();
        }
        b.snapshot(&path).unwrap();
        let restored = ReplayBuffer::restore(&path).unwrap();
        assert_eq!(restored.k_cap(), b.k_cap());
        assert_eq!(restored.capacity(), b.capacity());
        assert_eq!(restored.len(), b.len());
        for pid in 0..4 {
            assert_eq!(restored.entries(pid), b.entries(pid));
        }
    }

    #[test]
    fn empty_buffer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        let b = ReplayBuffer::new(4, 2, 3);
        b.snapshot(&path).unwrap();
        let restored = ReplayBuffer::restore(&path).unwrap();
        assert!(restored.is_empty());
        assert_eq!(restored.n_prompts(), 4);
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.json");
        let mut b = ReplayBuffer::new(4, 2, 3);
        b.push(entry(0, 0, 1)).unwrap();
        b.snapshot(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        match ReplayBuffer::restore(&path) {
            Err(Error::Integrity { offset, .. }) => assert!(offset > 0),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn caps_hold_and_eviction_preserves_order(
            pushes in proptest::collection::vec((0usize..6, 0u8..2), 1..200),
            k_cap in 1usize..5,
            capacity in 1usize..12,
        ) {
            let mut b = ReplayBuffer::new(6, k_cap, capacity);
            for (step, (pid, reward)) in pushes.iter().enumerate() {
                b.push(entry(*pid, step, *reward)).unwrap();
                prop_assert!(b.len() <= capacity);
                let mut total = 0;
                for q in 0..6 {
                    let entries = b.entries(q);
                    prop_assert!(entries.len() <= k_cap);
                    // Within a queue steps are non-decreasing: eviction never
                    // removes an entry newer than a survivor of the same prompt.
                    for w in entries.windows(2) {
                        prop_assert!(w[0].rollout.step <= w[1].rollout.step);
                    }
                    total += entries.len();
                }
                prop_assert_eq!(total, b.len());
            }
        }

        #[test]
        fn hint_is_always_a_success(
            pushes in proptest::collection::vec((0usize..3, 0u8..2), 0..60),
        ) {
            let mut b = ReplayBuffer::new(3, 4, 8);
            for (step, (pid, reward)) in pushes.iter().enumerate() {
                b.push(entry(*pid, step, *reward)).unwrap();
            }
            for pid in 0..3 {
                if let Some(h) = b.select_hint(pid) {
                    prop_assert_eq!(h.reward, 1);
                }
            }
        }
    }
}
