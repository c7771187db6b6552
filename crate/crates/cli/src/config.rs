//! Run configuration: JSON file, `--set key=value` overrides, validation.
//!
//! Loading goes defaults → file → overrides → typed struct, so every key a
//! user can write is visible in the echoed `config.json` and unknown keys are
//! rejected with their full path.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pte_core::grpo::TrainConfig;
use pte_core::metrics::ReportFormat;
use pte_core::model::{ModelConfig, Projection};
use pte_core::pretrain::PretrainConfig;
use pte_core::pte::{NormalizeMode, PteConfig};
use pte_core::rollout::SamplingConfig;
use pte_core::tasks::{prompt_len, Vocabulary, MAX_MODULUS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub depth: usize,
    pub modulus: u32,
    /// JSONL training set; tasks are generated from the seed when absent.
    pub dataset: Option<PathBuf>,
    /// JSONL evaluation set; generated held-out tasks when absent.
    pub eval_dataset: Option<PathBuf>,
    pub eval_tasks: usize,
    pub eval_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { depth: 4, modulus: 5, dataset: None, eval_dataset: None, eval_tasks: 200, eval_seed: 1_000_003 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Write `iter_{k}.ckpt` every this many iterations (0: only init/final).
    pub checkpoint_every: u64,
    /// Stop once the smoothed mean score has not improved by `min_delta` for
    /// this many iterations.
    pub early_stop_patience: Option<u64>,
    pub min_delta: f64,
    /// Moving-average width for the plateau test.
    pub plateau_window: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { checkpoint_every: 50, early_stop_patience: None, min_delta: 1e-3, plateau_window: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Window lengths to evaluate; empty means the sampling window only.
    pub windows: Vec<usize>,
    pub format: ReportFormat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { windows: Vec::new(), format: ReportFormat::Csv }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EvictionRatio,
    Window,
    GlobalTokens,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::EvictionRatio => "eviction_ratio",
            Self::Window => "window",
            Self::GlobalTokens => "global_tokens",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub format: ReportFormat,
    /// Training budget per value on the global-token axis.
    pub train_iterations: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::EvictionRatio,
            values: vec![0.25, 0.20, 0.15, 0.10, 0.05],
            format: ReportFormat::Csv,
            train_iterations: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub pte: PteConfig,
    pub prompt_len: usize,
    pub trajectories: usize,
    pub max_new_tokens: usize,
    /// Scale of the random `A` (zero `A` would make most gradients vanish).
    pub a_std: f64,
    pub kl_beta: f64,
    pub step: f64,
    pub threshold: f64,
    pub max_params: usize,
    pub train_base: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                d_head: 4,
                d_ff: 12,
                vocab_size: 7,
                max_positions: 64,
                ..ModelConfig::default()
            },
            pte: PteConfig {
                global_tokens: 2,
                latent_dim: 3,
                normalize: NormalizeMode::RowRms,
                targets: vec![Projection::Q, Projection::V],
                shared_global_tokens: true,
                zero_init_state: false,
                init_std: 0.4,
            },
            prompt_len: 4,
            trajectories: 4,
            max_new_tokens: 8,
            a_std: 0.4,
            kl_beta: 0.05,
            step: 1e-5,
            threshold: 1e-4,
            max_params: 10_000,
            train_base: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpConfig {
    pub tasks: usize,
    pub samples_per_task: usize,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self { tasks: 8, samples_per_task: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub pte: PteConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
    pub dump: DumpConfig,
}

impl Default for RunConfig {
    /// Depth-4 tasks mod 5; the window is 60% of prompt plus shortest correct
    /// response, so every correct answer needs at least one eviction.
    fn default() -> Self {
        let depth = 4;
        let window = window_for_fraction(depth, 0.6);
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            pte: PteConfig::default(),
            sampling: SamplingConfig {
                temperature: 1.0,
                max_new_tokens: 32,
                window,
                eviction_ratio: 0.25,
                sink_tokens: 0,
                greedy: false,
                stop_token: Some(Vocabulary::END),
                seed: 0,
            },
            train: TrainConfig { batch_size: 8, ..TrainConfig::default() },
            pretrain: PretrainConfig::default(),
            task: TaskConfig { depth, ..TaskConfig::default() },
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            gradcheck: GradcheckConfig::default(),
            dump: DumpConfig::default(),
        }
    }
}

/// `ceil(fraction · (prompt + shortest correct response))` for a depth.
pub fn window_for_fraction(depth: usize, fraction: f64) -> usize {
    let full = prompt_len(depth) + pte_core::tasks::TaskInstance::min_response_len(depth);
    (fraction * full as f64 - 1e-9).ceil() as usize
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pte.validate()?;
        self.sampling.validate().context("sampling")?;
        self.train.validate()?;
        self.pretrain.validate()?;
        Vocabulary::default().check_fits(self.model.vocab_size).context("model.vocab_size")?;
        if let Some(s) = self.sampling.stop_token {
            if s >= self.model.vocab_size {
                bail!("sampling.stop_token {s} outside a vocabulary of {}", self.model.vocab_size);
            }
        }
        if self.task.depth == 0 {
            bail!("task.depth must be at least 1");
        }
        if !(2..=MAX_MODULUS).contains(&self.task.modulus) {
            bail!("task.modulus must lie in 2..={MAX_MODULUS}");
        }
        if self.schedule.plateau_window == 0 {
            bail!("schedule.plateau_window must be at least 1");
        }
        if self.eval.windows.contains(&0) {
            bail!("eval.windows entries must be at least 1");
        }
        if self.dump.samples_per_task == 0 {
            bail!("dump.samples_per_task must be at least 1");
        }
        self.validate_sweep_values()?;
        self.gradcheck.model.validate().context("gradcheck.model")?;
        self.gradcheck.pte.validate().context("gradcheck.pte")?;
        if self.gradcheck.prompt_len == 0 || self.gradcheck.trajectories < 2 || self.gradcheck.max_new_tokens < 4 {
            bail!("gradcheck needs prompt_len >= 1, trajectories >= 2 and max_new_tokens >= 4");
        }
        if !(self.gradcheck.step > 0.0 && self.gradcheck.threshold > 0.0) {
            bail!("gradcheck.step and gradcheck.threshold must be > 0");
        }
        Ok(())
    }

    /// Axis values are checked up front so a sweep never fails halfway.
    pub fn validate_sweep_values(&self) -> Result<()> {
        let s = &self.sweep;
        if s.values.is_empty() {
            bail!("sweep.values is empty");
        }
        for &v in &s.values {
            let ok = match s.axis {
                SweepAxis::EvictionRatio => v > 0.0 && v <= 1.0,
                SweepAxis::Window | SweepAxis::GlobalTokens => {
                    v.fract() == 0.0 && v >= 0.0 && v <= 1e6 && (s.axis == SweepAxis::GlobalTokens || v >= 1.0)
                }
            };
            if !ok {
                bail!("sweep.values: {v} is not a valid {} value", s.axis.name());
            }
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("override {key:?}: {p:?} is not inside an object"))?;
        cur = obj.get_mut(*p).ok_or_else(|| anyhow!("override {key:?}: unknown key {p:?}"))?;
    }
    let obj = cur.as_object_mut().ok_or_else(|| anyhow!("override {key:?}: parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `key=value`; the value is JSON when it parses, a string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn from_value(v: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| anyhow!("config field `{}`: {}", e.path(), e.inner()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults, then the file, then overrides, then `--seed`/`--out`.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        if !file.is_object() {
            bail!("{}: top level must be a JSON object", p.display());
        }
        merge(&mut v, file);
    }
    for o in overrides {
        let (k, val) = parse_override(o)?;
        set_path(&mut v, &k, val)?;
    }
    if let Some(s) = seed {
        v["seed"] = Value::from(s);
    }
    if let Some(o) = out {
        v["out_dir"] = Value::String(o.to_string_lossy().into_owned());
    }
    from_value(v)
}

pub fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(cfg)?;
    s.push('\n');
    std::fs::write(dir.join("config.json"), s).context("writing config echo")?;
    Ok(())
}
