mod common;

use common::*;
use pte_core::grpo::{grpo_loss, trainable_names, RolloutGroup, TrainConfig};
use pte_core::model::{ModelConfig, ModelParams};
use pte_core::pte::AdapterBank;
use pte_core::rollout::{evicted_segments, rollout, SamplingConfig};
use pte_oracles::{compare, grpo_loss_oracle, numeric_gradient, OracleGroup};

fn instance(seed: u64) -> (ModelParams, AdapterBank, ModelParams) {
    let cfg = ModelConfig { n_layers: 1, d_model: 2, n_heads: 1, d_head: 2, d_ff: 2, vocab_size: 2, ..ModelConfig::default() };
    let (params, bank) = model_and_bank(cfg.clone(), pte(1, 2, 0.7), seed, 0.7);
    let reference = ModelParams::init(cfg, &mut rng(seed + 1000)).unwrap();
    (params, bank, reference)
}

/// Two prompts, two members each; every trajectory evicts once.
fn groups(params: &ModelParams, bank: &AdapterBank, seed: u64) -> Vec<RolloutGroup> {
    [[0usize, 1], [1, 1]]
        .iter()
        .enumerate()
        .map(|(i, prompt)| {
            let trajs: Vec<_> = (0..2)
                .map(|j| {
                    let sc = SamplingConfig {
                        window: 3,
                        eviction_ratio: 0.3,
                        max_new_tokens: 3,
                        seed: seed * 100 + (i * 2 + j) as u64,
                        ..SamplingConfig::default()
                    };
                    let t = rollout(params, bank, prompt, &sc).unwrap();
                    assert_eq!(t.replay.events.len(), 1);
                    t
                })
                .collect();
            RolloutGroup::new(prompt.to_vec(), trajs, vec![1.0, i as f64 * 0.5], 1e-8)
        })
        .collect()
}

#[test]
fn loss_and_every_gradient_match_the_oracle() {
    for (seed, train_base) in [(0, false), (1, true), (2, true)] {
        let (params, bank, reference) = instance(seed);
        let gs = groups(&params, &bank, seed);
        let cfg = TrainConfig { kl_beta: 0.05, train_base, ..TrainConfig::default() };
        let out = grpo_loss(&gs, &params, &bank, &reference, &cfg).unwrap();

        let og: Vec<OracleGroup> =
            gs.iter().map(|g| OracleGroup { trajectories: g.trajectories.clone(), scores: g.scores.clone() }).collect();
        let want = grpo_loss_oracle(&og, &params, &bank, &reference, cfg.kl_beta, cfg.reward_eps, None).unwrap();
        assert!((want - out.loss).abs() <= 1e-12 * want.abs().max(1.0), "loss {want} vs {}", out.loss);

        let pinned: Vec<Vec<_>> = gs
            .iter()
            .flat_map(|g| &g.trajectories)
            .map(|t| {
                evicted_segments(t, &params, &bank)
                    .unwrap()
                    .iter()
                    .map(|s| (s.keys.iter().map(nested).collect(), s.values.iter().map(nested).collect()))
                    .collect()
            })
            .collect();
        let names = trainable_names(&params, &bank, train_base);
        assert_eq!(names.len(), out.grads.len());
        for (name, an) in names.iter().zip(&out.grads) {
            let fd = numeric_gradient(&params, &bank, name, 1e-5, |p, b| {
                grpo_loss_oracle(&og, p, b, &reference, cfg.kl_beta, cfg.reward_eps, Some(&pinned)).unwrap()
            })
            .unwrap();
            let scale = an.frobenius_norm().max(fd.frobenius_norm());
            let err = an.sub(&fd).unwrap().frobenius_norm() / scale.max(1e-12);
            assert!(err < 1e-5 || scale < 1e-10, "seed {seed} {name}: rel err {err:.3e}");
        }
    }
}

#[test]
fn pinned_oracle_loss_equals_plain_loss_at_the_sampling_point() {
    let (params, bank, reference) = instance(4);
    let gs = groups(&params, &bank, 4);
    let og: Vec<OracleGroup> =
        gs.iter().map(|g| OracleGroup { trajectories: g.trajectories.clone(), scores: g.scores.clone() }).collect();
    let pinned: Vec<Vec<_>> = gs
        .iter()
        .flat_map(|g| &g.trajectories)
        .map(|t| {
            evicted_segments(t, &params, &bank)
                .unwrap()
                .iter()
                .map(|s| (s.keys.iter().map(nested).collect(), s.values.iter().map(nested).collect()))
                .collect()
        })
        .collect();
    let a = grpo_loss_oracle(&og, &params, &bank, &reference, 0.01, 1e-8, None).unwrap();
    let b = grpo_loss_oracle(&og, &params, &bank, &reference, 0.01, 1e-8, Some(&pinned)).unwrap();
    assert!(compare(&[a], &[b], 1e-14).passed);
}
