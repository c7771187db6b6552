//! Slow, loop-based reference implementations for the test suites.
//!
//! Everything here is written with explicit index loops over plain nested
//! vectors. The production crate's matrix kernels, autodiff graph, cache and
//! adapter arithmetic are deliberately not used; only parameter containers and
//! trajectory records are read.

pub mod compare;
pub mod counting;
pub mod decode;
pub mod forward;
pub mod grad;
pub mod objective;
pub mod state;

pub use compare::{compare, OracleResult};
pub use counting::{attention_flops_by_loops, cache_elements_by_loops, chain_answer};
pub use decode::{enumerate_trajectory_distribution, replay_oracle, replay_oracle_substituting, OracleDecoder};
pub use forward::{full_matrix_forward, Dense};
pub use grad::numeric_gradient;
pub use objective::{grpo_loss_oracle, normalize_rewards_oracle, OracleGroup};
pub use state::{delta_oracle, normalize_rows_oracle, triple_product_oracle, OracleAdapters};

/// Oracle failures are plain messages; callers are tests.
pub type OracleError = String;
