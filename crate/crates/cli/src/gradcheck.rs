//! `gradcheck`: analytic GRPO gradients against central differences.
//!
//! The objective is evaluated with each trajectory's evicted keys and values
//! pinned at their sampled values, which is exactly the function the analytic
//! gradient differentiates (evicted rows are treated as constants).

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use pte_core::grpo::{grpo_loss, grpo_objective, reference_logprobs, trainable_names, RolloutGroup, TrainConfig};
use pte_core::model::{ModelParams, TokenId};
use pte_core::numerics::Matrix;
use pte_core::pte::AdapterBank;
use pte_core::rng::{substream, substream_seed};
use pte_core::rollout::{evicted_segments, rollout, SamplingConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub parameters: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the group.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub parameter_count: usize,
    pub evictions: usize,
    pub threshold: f64,
    pub groups: Vec<GroupError>,
    pub worst_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<8} {:>7} {:>12} {:>12} {:>12}", "group", "params", "rel_err", "max_abs", "|analytic|")?;
        for g in &self.groups {
            writeln!(f, "{:<8} {:>7} {:>12.3e} {:>12.3e} {:>12.3e}", g.group, g.parameters, g.rel_error, g.max_abs_error, g.analytic_norm)?;
        }
        write!(
            f,
            "{} parameters, {} evictions, worst {:.3e} vs threshold {:.0e}: {}",
            self.parameter_count,
            self.evictions,
            self.worst_rel_error,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn slot<'a>(params: &'a mut ModelParams, bank: &'a mut AdapterBank, name: &str) -> Option<&'a mut Matrix> {
    if let Some((_, m)) = bank.named_mut().into_iter().find(|(n, _)| n == name) {
        return Some(m);
    }
    params.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
}

fn group_of(name: &str, bank: &AdapterBank) -> String {
    if bank.named().iter().any(|(n, _)| n == name) {
        AdapterBank::group_of(name).to_string()
    } else {
        "base".to_string()
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let gc = &cfg.gradcheck;
    let params = ModelParams::init(gc.model.clone(), &mut substream(cfg.seed, "gradcheck-model", &[]))?;
    let reference = ModelParams::init(gc.model.clone(), &mut substream(cfg.seed, "gradcheck-reference", &[]))?;
    let mut bank = AdapterBank::init(gc.pte.clone(), &params, &mut substream(cfg.seed, "gradcheck-bank", &[]))?;
    let mut rng = substream(cfg.seed, "gradcheck-a", &[]);
    for ad in &mut bank.adapters {
        ad.a = Matrix::random_normal(ad.a.rows(), ad.a.cols(), gc.a_std, &mut rng);
    }
    let count = bank.parameter_count() + if gc.train_base { params.named().iter().map(|(_, m)| m.len()).sum() } else { 0 };
    if count > gc.max_params {
        bail!("gradcheck refused: {count} trainable parameters exceed the cap of {}", gc.max_params);
    }

    // A window two entries past the prompt forces evictions on every member.
    let mut prng = substream(cfg.seed, "gradcheck-prompt", &[]);
    let prompt: Vec<TokenId> = (0..gc.prompt_len).map(|_| prng.gen_range(0..gc.model.vocab_size)).collect();
    let members: Vec<_> = (0..gc.trajectories)
        .map(|j| {
            let sc = SamplingConfig {
                window: gc.prompt_len + 2,
                eviction_ratio: 0.3,
                max_new_tokens: gc.max_new_tokens,
                stop_token: None,
                seed: substream_seed(cfg.seed, "gradcheck-rollout", &[j as u64]),
                ..SamplingConfig::default()
            };
            rollout(&params, &bank, &prompt, &sc)
        })
        .collect::<pte_core::error::Result<_>>()?;
    let scores: Vec<f64> = (0..gc.trajectories).map(|j| (j % 2) as f64).collect();
    let tc = TrainConfig { kl_beta: gc.kl_beta, train_base: gc.train_base, ..TrainConfig::default() };
    let groups = vec![RolloutGroup::new(prompt, members, scores, tc.reward_eps)];
    let evictions: usize = groups[0].trajectories.iter().map(|t| t.replay.events.len()).sum();
    if evictions == 0 {
        bail!("gradcheck batch has no eviction event");
    }

    let analytic = grpo_loss(&groups, &params, &bank, &reference, &tc)?;
    let refs = reference_logprobs(&groups, &reference)?;
    let pinned = groups[0]
        .trajectories
        .iter()
        .map(|t| evicted_segments(t, &params, &bank))
        .collect::<pte_core::error::Result<Vec<_>>>()?;
    let objective = |p: &ModelParams, b: &AdapterBank| grpo_objective(&groups, p, b, &refs, &tc, Some(&pinned));
    let at_point = objective(&params, &bank)?;
    if (at_point - analytic.loss).abs() > 1e-10 * analytic.loss.abs().max(1.0) {
        bail!("pinned objective {at_point} differs from the loss {} at the sampling point", analytic.loss);
    }

    // group -> (Σ(a−n)², Σa², Σn², max |a−n|, count)
    let mut acc: BTreeMap<String, (f64, f64, f64, f64, usize)> = BTreeMap::new();
    let (mut p, mut b) = (params.clone(), bank.clone());
    let h = gc.step;
    for (name, an) in trainable_names(&params, &bank, gc.train_base).iter().zip(&analytic.grads) {
        let e = acc.entry(group_of(name, &bank)).or_default();
        for i in 0..an.len() {
            let orig = slot(&mut p, &mut b, name).context("unknown parameter")?.data()[i];
            slot(&mut p, &mut b, name).unwrap().data_mut()[i] = orig + h;
            let plus = objective(&p, &b)?;
            slot(&mut p, &mut b, name).unwrap().data_mut()[i] = orig - h;
            let minus = objective(&p, &b)?;
            slot(&mut p, &mut b, name).unwrap().data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * h);
            let a = an.data()[i];
            e.0 += (a - num) * (a - num);
            e.1 += a * a;
            e.2 += num * num;
            e.3 = e.3.max((a - num).abs());
            e.4 += 1;
        }
    }
    let groups: Vec<GroupError> = acc
        .into_iter()
        .map(|(group, (d2, a2, n2, max_abs, n))| {
            let scale = a2.sqrt().max(n2.sqrt());
            GroupError {
                group,
                parameters: n,
                rel_error: if scale > 0.0 { d2.sqrt() / scale } else { 0.0 },
                max_abs_error: max_abs,
                analytic_norm: a2.sqrt(),
            }
        })
        .collect();
    let worst = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        parameter_count: count,
        evictions,
        threshold: gc.threshold,
        passed: worst < gc.threshold && groups.iter().all(|g| g.analytic_norm > 0.0),
        worst_rel_error: worst,
        groups,
    })
}
