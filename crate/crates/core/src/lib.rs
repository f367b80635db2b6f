//! Learning from a behavior policy with sparse rewards: TRPO-style policy
//! improvement followed by a KL-guided step toward demonstrations.

pub mod approximator;
pub mod demos;
pub mod environments;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod mdp_core;
pub mod policy;
pub mod tabular_oracle;
pub mod trpo_step;

pub use error::{LogoError, Result};

/// Seeded generator used for every source of randomness.
pub type SimRng = rand_chacha::ChaCha8Rng;
