//! Agent-native reinforcement learning at desk scale.
//!
//! A micro causal policy is trained with a clipped importance-sampling
//! policy gradient on simulated tool-use episodes. Rollouts pass through a
//! gateway and data pool, are released to the trainer by a windowed FIFO
//! scheduler, and are batched as prefix trees so shared context is computed
//! once.

pub mod env;
pub mod experiment;
pub mod gateway;
pub mod jsonl;
pub mod policy;
pub mod prefix;
pub mod rl;
pub mod scheduler;
pub mod seed;
pub mod trajectory;
pub mod vocab;
