mod common;

use common::*;
use pte_core::cache::{CacheConfig, KVCache};
use pte_core::model::{prefill, AdapterOverlay, ModelConfig, ModelParams, PositionMode, PositionalScheme};
use pte_core::numerics::Matrix;
use pte_oracles::{compare, full_matrix_forward};
use rand::Rng;

fn prefill_logits(params: &ModelParams, tokens: &[usize]) -> Matrix {
    let c = &params.config;
    let mut cache = KVCache::new(c.n_layers, c.d_model, CacheConfig::new(tokens.len(), 1.0)).unwrap();
    prefill(tokens, &mut cache, params, &AdapterOverlay::empty(c.n_layers)).unwrap()
}

#[test]
fn random_prompts_match_full_matrix_forward() {
    for seed in 0..10 {
        let params = ModelParams::init(ModelConfig::default(), &mut rng(seed)).unwrap();
        let mut r = rng(100 + seed);
        let tokens: Vec<usize> = (0..8).map(|_| r.gen_range(0..32)).collect();
        let got = prefill_logits(&params, &tokens);
        let want = full_matrix_forward(&params, &tokens);
        let res = compare(&flat(&want), got.data(), 1e-12);
        assert!(res.passed, "seed {seed}: {res}");
    }
}

#[test]
fn long_sequences_and_position_variants_match() {
    let variants = [
        (PositionalScheme::Rotary, PositionMode::Absolute),
        (PositionalScheme::Rotary, PositionMode::CacheSlot),
        (PositionalScheme::None, PositionMode::Absolute),
    ];
    for (i, (scheme, mode)) in variants.into_iter().enumerate() {
        let cfg = ModelConfig { positional_scheme: scheme, position_mode: mode, ..small_config(2, 11) };
        let params = ModelParams::init(cfg, &mut rng(i as u64)).unwrap();
        let mut r = rng(7);
        let tokens: Vec<usize> = (0..48).map(|_| r.gen_range(0..11)).collect();
        let res = compare(&flat(&full_matrix_forward(&params, &tokens)), prefill_logits(&params, &tokens).data(), 1e-12);
        assert!(res.passed, "{scheme:?}/{mode:?}: {res}");
    }
}

/// One layer, two-token vocabulary, hand-chosen weights.
#[test]
fn hand_set_two_token_model() {
    let cfg = ModelConfig { n_layers: 1, d_model: 2, n_heads: 1, d_head: 2, d_ff: 2, vocab_size: 2, ..ModelConfig::default() };
    let m = |rows: &[[f64; 2]]| Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let named = vec![
        ("embedding".to_string(), m(&[[1.0, 0.0], [0.0, 1.0]])),
        ("layers.0.wq".to_string(), m(&[[1.0, 0.5], [0.0, 1.0]])),
        ("layers.0.wk".to_string(), m(&[[0.5, 0.0], [0.25, 1.0]])),
        ("layers.0.wv".to_string(), m(&[[1.0, -1.0], [2.0, 0.0]])),
        ("layers.0.wo".to_string(), m(&[[0.5, 0.0], [0.0, 0.5]])),
        ("layers.0.w_up".to_string(), m(&[[1.0, 1.0], [-1.0, 0.5]])),
        ("layers.0.w_down".to_string(), m(&[[0.3, 0.0], [0.0, -0.3]])),
        ("layers.0.attn_gain".to_string(), Matrix::filled(1, 2, 1.0)),
        ("layers.0.ffn_gain".to_string(), Matrix::filled(1, 2, 1.0)),
        ("final_gain".to_string(), Matrix::filled(1, 2, 1.0)),
        ("head".to_string(), m(&[[1.0, 0.0], [0.0, 1.0]])),
    ];
    let params = ModelParams::from_named(cfg, named).unwrap();
    let tokens = [0, 1, 1, 0, 1];
    let res = compare(&flat(&full_matrix_forward(&params, &tokens)), prefill_logits(&params, &tokens).data(), 1e-12);
    assert!(res.passed, "{res}");
}
