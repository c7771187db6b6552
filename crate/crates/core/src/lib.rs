//! Cache-constrained autoregressive decoding with progressive thought
//! encoding, and a cache-aware GRPO trainer built on top of it.

pub mod error;
pub mod grpo;
pub mod metrics;
pub mod cache;
pub mod model;
pub mod pretrain;
pub mod pte;
pub mod rng;
pub mod rollout;
pub mod tasks;
pub mod numerics;

pub use error::{Error, Result};
