//! Supervised warm start of the base model on reference chains.
//!
//! Reinforcement learning on exact-match rewards only has signal once the
//! base policy sometimes produces a correct answer, so runs begin by fitting
//! the base model to gold responses with a full cache (teacher forcing).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{effective_projections, forward_chunk, AdapterOverlay, CacheView, ModelParams};
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState, DiffGraph, Matrix, TensorOps};
use crate::rng::{substream, substream_seed};
use crate::tasks::{generate_task, TaskInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Task depths are drawn uniformly from `min_depth..=max_depth`.
    pub min_depth: usize,
    pub max_depth: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, learning_rate: 3e-3, max_grad_norm: 1.0, min_depth: 1, max_depth: 4 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.min_depth == 0 || self.min_depth > self.max_depth {
            return Err(Error::Config("pretrain: batch_size >= 1 and 1 <= min_depth <= max_depth required".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("pretrain: learning_rate >= 0 and max_grad_norm > 0 required".into()));
        }
        Ok(())
    }
}

/// Mean next-token cross-entropy of the gold responses and its gradient with
/// respect to every base-model matrix (in [`ModelParams::named`] order).
pub fn supervised_loss(params: &ModelParams, tasks: &[TaskInstance]) -> Result<(f64, Vec<Matrix>)> {
    let seqs: Vec<(Vec<usize>, usize)> = tasks
        .iter()
        .map(|t| {
            let gold = t.gold_response().ok_or_else(|| Error::Contract("task prompt is not a well-formed chain".into()))?;
            let mut s = t.prompt_tokens.clone();
            s.extend(gold);
            Ok((s, t.prompt_tokens.len()))
        })
        .collect::<Result<_>>()?;
    let total: usize = seqs.iter().map(|(s, p)| s.len() - p).sum();
    if total == 0 {
        return Err(Error::Contract("no target tokens".into()));
    }
    let rope = params.config.rope_table();
    let terms: Vec<(f64, Vec<Matrix>)> = seqs
        .par_iter()
        .map(|(seq, p)| {
            let mut g = DiffGraph::new();
            let model = params.bind_trainable(&mut g);
            let overlay = AdapterOverlay::empty(params.config.n_layers);
            let projections = effective_projections(&mut g, &model, &overlay)?;
            let empty = g.constant(Matrix::zeros(0, params.config.d_model));
            let view = CacheView {
                keys: vec![&empty; params.config.n_layers],
                values: vec![&empty; params.config.n_layers],
                positions: &[],
            };
            let inputs = &seq[..seq.len() - 1];
            let positions: Vec<usize> = (0..inputs.len()).collect();
            let out = forward_chunk(&mut g, &params.config, &rope, &model, &projections, &view, inputs, &positions)?;
            let rows = g.slice_rows(&out.logits, p - 1, inputs.len());
            let logp = g.log_softmax_rows(&rows);
            let picked = g.pick(&logp, &seq[*p..])?;
            let s = g.sum(&picked);
            let loss = g.scale(&s, -1.0 / total as f64);
            let grads = g.backward(loss)?;
            let mats = params
                .named()
                .iter()
                .map(|(n, m)| grads.by_name(n).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
                .collect();
            Ok((g.value(&loss).get(0, 0), mats))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads: Vec<Matrix> = params.named().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
    for (l, gs) in terms {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            acc.add_assign(g)?;
        }
    }
    Ok((loss, grads))
}

/// Tasks for one pretraining step, drawn from the run seed.
pub fn sample_batch(seed: u64, step: usize, cfg: &PretrainConfig, modulus: u32) -> Result<Vec<TaskInstance>> {
    let mut rng = substream(seed, "pretrain-batch", &[step as u64]);
    (0..cfg.batch_size)
        .map(|i| {
            let depth = rng.gen_range(cfg.min_depth..=cfg.max_depth);
            generate_task(substream_seed(seed, "pretrain-task", &[step as u64, i as u64]), depth, modulus)
        })
        .collect()
}

/// Runs the warm start in place; `on_step(step, loss)` observes progress.
pub fn pretrain(
    params: &mut ModelParams,
    cfg: &PretrainConfig,
    modulus: u32,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    cfg.validate()?;
    let adam_cfg = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
    let mut adam = AdamState::new(params.named().into_iter().map(|(_, m)| m));
    for step in 0..cfg.steps {
        let batch = sample_batch(seed, step, cfg, modulus)?;
        let (loss, mut grads) = supervised_loss(params, &batch)?;
        clip_global_norm(&mut grads, cfg.max_grad_norm)?;
        let mut slots: Vec<&mut Matrix> = params.named_mut().into_iter().map(|(_, m)| m).collect();
        adam_step(&mut slots, &grads, &mut adam, &adam_cfg)?;
        on_step(step, loss);
    }
    Ok(())
}
