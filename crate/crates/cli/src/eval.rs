//! `eval` and `sweep`: greedy success rates and efficiency per cache setting.

use anyhow::{bail, Context, Result};
use pte_core::metrics::{emit_report, DecodeSchedule, EfficiencyReport, ReportFormat, RunRecord};
use pte_core::model::{ModelConfig, ModelParams, TokenId};
use pte_core::pte::AdapterBank;
use pte_core::rollout::{rollout, SamplingConfig};
use pte_core::tasks::{score, TaskInstance};
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{echo, RunConfig, SweepAxis};
use crate::lock::DirLock;
use crate::train::{cmd_train, eval_tasks, Progress, RunDir};

pub struct Response {
    pub tokens: Vec<TokenId>,
    pub schedule: DecodeSchedule,
}

/// Anything that answers a task under a cache configuration.
pub trait Policy: Sync {
    fn respond(&self, task: &TaskInstance, sampling: &SamplingConfig) -> Result<Response>;
}

pub struct ModelPolicy<'a> {
    pub params: &'a ModelParams,
    pub bank: &'a AdapterBank,
}

impl Policy for ModelPolicy<'_> {
    fn respond(&self, task: &TaskInstance, sampling: &SamplingConfig) -> Result<Response> {
        let t = rollout(self.params, self.bank, &task.prompt_tokens, sampling)?;
        let schedule = DecodeSchedule::from_trajectory(&t)?;
        Ok(Response { tokens: t.generated_tokens, schedule })
    }
}

/// Replays the reference chain; checks the verifier and accounting plumbing.
pub struct GoldPolicy;

impl Policy for GoldPolicy {
    fn respond(&self, task: &TaskInstance, sampling: &SamplingConfig) -> Result<Response> {
        let tokens = task.gold_response().context("task has no reference chain")?;
        let schedule = DecodeSchedule::windowed(task.prompt_tokens.len(), tokens.len(), &sampling.cache_config())?;
        Ok(Response { tokens, schedule })
    }
}

pub struct Evaluation {
    pub record: RunRecord,
    /// One line per skipped task.
    pub diagnostics: Vec<String>,
}

/// Greedy decoding of every task; tasks whose prompt does not fit are skipped.
pub fn evaluate(
    policy: &dyn Policy,
    tasks: &[TaskInstance],
    sampling: &SamplingConfig,
    model: &ModelConfig,
    axis: &str,
    value: f64,
    global_tokens: usize,
) -> Result<Evaluation> {
    let sc = SamplingConfig { greedy: true, ..sampling.clone() };
    sc.validate()?;
    let outcomes: Vec<std::result::Result<(f64, DecodeSchedule), String>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            if let Err(e) = sc.check_prompt(task.prompt_tokens.len()) {
                return Ok(Err(format!("task {i}: skipped: {e}")));
            }
            let r = policy.respond(task, &sc).with_context(|| format!("task {i}"))?;
            Ok(Ok((score(&r.tokens, task), r.schedule)))
        })
        .collect::<Result<_>>()?;
    let mut diagnostics = Vec::new();
    let mut schedules = Vec::new();
    let mut solved = 0.0;
    for o in outcomes {
        match o {
            Ok((s, sched)) => {
                solved += s;
                schedules.push(sched);
            }
            Err(d) => diagnostics.push(d),
        }
    }
    let eff = EfficiencyReport::aggregate(&schedules, model)?;
    let evaluated = schedules.len();
    let record = RunRecord {
        label: format!("{axis}={value}"),
        axis: axis.to_string(),
        value,
        window: sc.window,
        eviction_ratio: sc.eviction_ratio,
        global_tokens,
        tasks: evaluated,
        skipped: diagnostics.len(),
        success_rate: if evaluated == 0 { 0.0 } else { solved / evaluated as f64 },
        max_attention_flops: eff.max_attention_flops,
        mean_attention_flops: eff.mean_attention_flops,
        max_cache_elements: eff.max_cache_elements,
        mean_cache_elements: eff.mean_cache_elements,
    };
    Ok(Evaluation { record, diagnostics })
}

fn extension(f: ReportFormat) -> &'static str {
    match f {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    }
}

/// `eval`: one row per requested window on a loaded checkpoint.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &std::path::Path, progress: Progress) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ck = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let dir = RunDir::new(&cfg.out_dir)?;
    echo(cfg, &cfg.out_dir)?;
    let tasks = eval_tasks(cfg)?;
    let windows = if cfg.eval.windows.is_empty() { vec![cfg.sampling.window] } else { cfg.eval.windows.clone() };
    let policy = ModelPolicy { params: &ck.state.params, bank: &ck.state.bank };
    let g = ck.state.bank.config.global_tokens;
    let mut rows = Vec::new();
    for w in windows {
        let sc = SamplingConfig { window: w, ..cfg.sampling.clone() };
        let ev = evaluate(&policy, &tasks, &sc, &ck.state.params.config, "window", w as f64, g)?;
        for d in &ev.diagnostics {
            progress(&format!("window {w}: {d}"));
        }
        progress(&format!("window {w}: success {:.3} over {} tasks ({} skipped)", ev.record.success_rate, ev.record.tasks, ev.record.skipped));
        rows.push(ev.record);
    }
    emit_report(&rows, &dir.report(&format!("eval.{}", extension(cfg.eval.format))), cfg.eval.format)?;
    Ok(rows)
}

/// `sweep`: inference-time axes reuse the checkpoint; the global-token axis
/// adapts the checkpoint's base model once per value. Value 0 keeps the
/// configured number of global tokens but starts every context state at zero.
pub fn cmd_sweep(cfg: &RunConfig, ckpt: &std::path::Path, progress: Progress) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    cfg.validate_sweep_values()?;
    let ck = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let axis = cfg.sweep.axis;
    if axis == SweepAxis::GlobalTokens {
        for &v in &cfg.sweep.values {
            let mut sub = cfg.clone();
            if v > 0.0 {
                sub.pte.global_tokens = v as usize;
            }
            sub.validate().with_context(|| format!("sweep value {v}"))?;
        }
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let dir = RunDir::new(&cfg.out_dir)?;
    echo(cfg, &cfg.out_dir)?;
    let tasks = eval_tasks(cfg)?;
    let model = &ck.state.params.config;
    let mut rows = Vec::new();
    for &v in &cfg.sweep.values {
        let ev = match axis {
            SweepAxis::EvictionRatio | SweepAxis::Window => {
                let mut sc = cfg.sampling.clone();
                if axis == SweepAxis::EvictionRatio {
                    sc.eviction_ratio = v;
                } else {
                    sc.window = v as usize;
                }
                let policy = ModelPolicy { params: &ck.state.params, bank: &ck.state.bank };
                evaluate(&policy, &tasks, &sc, model, axis.name(), v, ck.state.bank.config.global_tokens)?
            }
            SweepAxis::GlobalTokens => {
                let mut sub = cfg.clone();
                sub.out_dir = cfg.out_dir.join("sweep").join(format!("global_tokens_{v}"));
                sub.train.iterations = cfg.sweep.train_iterations;
                sub.train.train_base = false;
                if v == 0.0 {
                    sub.pte.zero_init_state = true;
                } else {
                    sub.pte.global_tokens = v as usize;
                }
                progress(&format!("global_tokens {v}: training {} iterations", sub.train.iterations));
                let out = cmd_train(&sub, false, Some(ck.state.params.clone()), progress)?;
                let policy = ModelPolicy { params: &out.state.params, bank: &out.state.bank };
                evaluate(&policy, &tasks, &cfg.sampling, model, axis.name(), v, v as usize)?
            }
        };
        progress(&format!("{}={v}: success {:.3} ({} skipped)", axis.name(), ev.record.success_rate, ev.record.skipped));
        rows.push(ev.record);
    }
    if rows.len() != cfg.sweep.values.len() {
        bail!("sweep produced {} rows for {} values", rows.len(), cfg.sweep.values.len());
    }
    let name = format!("sweep_{}.{}", axis.name(), extension(cfg.sweep.format));
    emit_report(&rows, &dir.report(&name), cfg.sweep.format)?;
    Ok(rows)
}
