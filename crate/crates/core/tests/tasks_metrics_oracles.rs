mod common;

use common::*;
use pte_core::cache::CacheConfig;
use pte_core::metrics::{attention_flops_step, cache_elements, DecodeSchedule};
use pte_core::model::ModelConfig;
use pte_core::rollout::{rollout, SamplingConfig};
use pte_core::tasks::{generate_task, score, Vocabulary};
use pte_oracles::{attention_flops_by_loops, cache_elements_by_loops, chain_answer};

#[test]
fn gold_answers_match_independent_evaluation() {
    for modulus in 2..=10 {
        for depth in 1..=5 {
            for seed in 0..40 {
                let t = generate_task(seed, depth, modulus).unwrap();
                let want = chain_answer(&t.prompt_tokens, modulus).expect("well-formed prompt");
                assert_eq!(t.gold_answer_tokens, vec![Vocabulary::digit(want)]);
                let gold = t.gold_response().unwrap();
                assert_eq!(score(&gold, &t), 1.0);
            }
        }
    }
}

#[test]
fn every_residue_occurs_as_an_answer() {
    for modulus in [3, 5, 7] {
        let mut seen = vec![false; modulus as usize];
        for seed in 0..300 {
            let t = generate_task(seed, 4, modulus).unwrap();
            seen[chain_answer(&t.prompt_tokens, modulus).unwrap() as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "modulus {modulus}: {seen:?}");
    }
}

#[test]
fn accounting_matches_loop_counts() {
    let configs = [
        ModelConfig::default(),
        ModelConfig { n_layers: 1, n_heads: 1, d_head: 2, d_model: 2, ..ModelConfig::default() },
        ModelConfig { n_layers: 3, n_heads: 2, d_head: 4, d_model: 8, ..ModelConfig::default() },
    ];
    for c in &configs {
        for len in [1, 2, 7, 16, 33] {
            assert_eq!(attention_flops_step(len, c).unwrap(), attention_flops_by_loops(len, c));
            assert_eq!(cache_elements(len, c), cache_elements_by_loops(len, c));
        }
    }
    assert_eq!(attention_flops_by_loops(16, &ModelConfig::default()), 4096);
}

#[test]
fn simulated_schedule_matches_sampled_trajectories() {
    let (params, bank) = model_and_bank(small_config(1, 7), pte(2, 2, 0.3), 9, 0.3);
    for (window, ratio, sink) in [(6, 0.25, 0), (9, 0.5, 0), (7, 0.1, 5), (5, 1.0, 0)] {
        let sc = SamplingConfig { window, eviction_ratio: ratio, sink_tokens: sink, max_new_tokens: 40, seed: 3, ..SamplingConfig::default() };
        let t = rollout(&params, &bank, &[1, 2, 3], &sc).unwrap();
        let cc = CacheConfig { window, eviction_ratio: ratio, sink_tokens: sink };
        assert_eq!(DecodeSchedule::from_trajectory(&t).unwrap(), DecodeSchedule::windowed(3, 40, &cc).unwrap(), "{cc:?}");
    }
}
