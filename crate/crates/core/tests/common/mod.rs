#![allow(dead_code)]

use pte_core::model::{ModelConfig, ModelParams, Projection};
use pte_core::numerics::Matrix;
use pte_core::pte::{AdapterBank, NormalizeMode, PteConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig { n_layers: layers, d_model: 8, n_heads: 2, d_head: 4, d_ff: 12, vocab_size: vocab, ..ModelConfig::default() }
}

/// Model plus a bank whose `A` matrices are nonzero so deltas matter.
pub fn model_and_bank(config: ModelConfig, pte: PteConfig, seed: u64, a_std: f64) -> (ModelParams, AdapterBank) {
    let mut r = rng(seed);
    let params = ModelParams::init(config, &mut r).unwrap();
    let mut bank = AdapterBank::init(pte, &params, &mut r).unwrap();
    for ad in &mut bank.adapters {
        ad.a = Matrix::random_normal(ad.a.rows(), ad.a.cols(), a_std, &mut r);
    }
    (params, bank)
}

pub fn pte(g: usize, dc: usize, init_std: f64) -> PteConfig {
    PteConfig { global_tokens: g, latent_dim: dc, init_std, ..PteConfig::default() }
}

/// A spread of adapter configurations exercising every option.
pub fn pte_variants() -> Vec<PteConfig> {
    vec![
        pte(4, 4, 0.3),
        PteConfig { normalize: NormalizeMode::SegmentAverage, ..pte(2, 3, 0.3) },
        PteConfig { shared_global_tokens: false, targets: Projection::ALL.to_vec(), ..pte(3, 2, 0.3) },
        PteConfig { zero_init_state: true, ..pte(2, 2, 0.3) },
    ]
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut rng(seed))
}

pub fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}
