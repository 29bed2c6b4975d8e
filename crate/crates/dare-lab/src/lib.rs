//! Desk-scale laboratory for difficulty-adaptive reinforcement learning:
//! co-evolved SNIS difficulty estimation over a prompt-wise replay buffer,
//! symmetric-Beta prompt selection, and tiered reward-shaped GRPO on a
//! synthetic token-sequence world where exact failure probabilities are
//! computable by enumeration.

pub mod buffer;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod sampler;
pub mod streams;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use policy::ToyPolicy;
pub use world::{make_world, init_policy, PromptSpec, Rollout, World, WorldConfig};
