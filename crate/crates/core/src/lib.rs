//! Incremental self-adaptive meta-reinforcement learning on a synthetic multi-altitude
//! grid city.
//!
//! Layers, bottom up:
//! - [`autodiff`]: reverse-mode AD with differentiable backward passes.
//! - [`policy_net`]: goal-conditioned actor-critic over flat parameter vectors.
//! - [`env`]: the grid-city MDP, altitude levels and task sampling.
//! - [`rl`]: segment rollouts and the actor-critic interaction loss.
//! - [`isar`]: within-episode inner/outer updates and the episode-level baseline.
//! - [`meta`]: meta-training over task batches, curriculum fine-tuning and transfer.

pub mod autodiff;
pub mod env;
pub mod error;
pub mod invariants;
pub mod isar;
pub mod meta;
pub mod metrics;
pub mod policy_net;
pub mod rl;
pub mod seed;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
