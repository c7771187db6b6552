//! Group-relative policy objective recomputed from scratch.

use pte_core::model::ModelParams;
use pte_core::pte::AdapterBank;
use pte_core::rollout::Trajectory;

use crate::decode::replay_oracle_substituting;
use crate::forward::Rows;
use crate::forward::{full_matrix_forward, log_softmax};
use crate::OracleError;

/// A prompt's sampled trajectories and their raw scores.
#[derive(Clone, Debug)]
pub struct OracleGroup {
    pub trajectories: Vec<Trajectory>,
    pub scores: Vec<f64>,
}

/// `(s - mean) / sqrt(var + eps)` with the population variance.
pub fn normalize_rewards_oracle(scores: &[f64], eps: f64) -> Vec<f64> {
    let n = scores.len() as f64;
    let mut mean = 0.0;
    for s in scores {
        mean += s / n;
    }
    let mut var = 0.0;
    for s in scores {
        var += (s - mean).powi(2) / n;
    }
    scores.iter().map(|s| (s - mean) / (var + eps).sqrt()).collect()
}

/// Reference log-probabilities of the generated tokens with the whole stream
/// visible.
fn reference_logprobs(traj: &Trajectory, reference: &ModelParams) -> Vec<f64> {
    let mut stream = traj.prompt_tokens.clone();
    stream.extend_from_slice(&traj.generated_tokens[..traj.generated_tokens.len() - 1]);
    let logits = full_matrix_forward(reference, &stream);
    let p = traj.prompt_tokens.len();
    traj.generated_tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(&logits[p - 1 + i], traj.temperature)[t])
        .collect()
}

/// `-(1/N) Σ_trajectories [r · Σ log π − β · Σ (e^Δ − Δ − 1)]`, `Δ = log π_ref − log π`,
/// with `N` the total number of generated tokens. When `segments` is given,
/// trajectory `i` (in group order) absorbs `segments[i]` at its evictions.
pub fn grpo_loss_oracle(
    groups: &[OracleGroup],
    params: &ModelParams,
    bank: &AdapterBank,
    reference: &ModelParams,
    kl_beta: f64,
    reward_eps: f64,
    segments: Option<&[Vec<(Vec<Rows>, Vec<Rows>)>]>,
) -> Result<f64, OracleError> {
    let mut tokens = 0usize;
    for g in groups {
        for t in &g.trajectories {
            tokens += t.generated_tokens.len();
        }
    }
    if tokens == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut index = 0;
    for g in groups {
        let rewards = normalize_rewards_oracle(&g.scores, reward_eps);
        for (t, r) in g.trajectories.iter().zip(rewards) {
            let sub = segments.map(|s| s[index].as_slice());
            index += 1;
            let cur = replay_oracle_substituting(t, params, bank, sub)?;
            let refs = reference_logprobs(t, reference);
            let mut logp = 0.0;
            let mut kl = 0.0;
            for (c, rf) in cur.iter().zip(&refs) {
                logp += c;
                let d = rf - c;
                kl += d.exp() - d - 1.0;
            }
            total += r * logp - kl_beta * kl;
        }
    }
    Ok(-total / tokens as f64)
}
