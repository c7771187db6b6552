//! Trainer, evaluator and sweep harness around `pte-core`.

pub mod checkpoint;
pub mod config;
pub mod dump;
pub mod eval;
pub mod gradcheck;
pub mod lock;
pub mod train;

pub use config::RunConfig;

/// Sizes the global worker pool from `PTE_THREADS`; unset means rayon's default.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PTE_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("PTE_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("PTE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
