//! `train`: warm start, GRPO iterations, checkpoints, metrics log, resume.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pte_core::grpo::{train_step, StepMetrics, TrainState};
use pte_core::model::ModelParams;
use pte_core::pretrain::pretrain;
use pte_core::pte::AdapterBank;
use pte_core::rng::{substream, substream_seed};
use pte_core::tasks::{generate_task, load_dataset, TaskInstance};
use rand::Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{echo, RunConfig};
use crate::lock::DirLock;

pub type Progress<'a> = &'a dyn Fn(&str);

pub fn quiet(_: &str) {}

/// Fixed output layout.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "reports"] {
            std::fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

/// Training prompts: generated from the run seed, or drawn from a dataset.
pub enum TaskSource {
    Generated { seed: u64, depth: usize, modulus: u32 },
    Dataset { seed: u64, instances: Vec<TaskInstance> },
}

impl TaskSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let Some(path) = &cfg.task.dataset else {
            return Ok(Self::Generated { seed: cfg.seed, depth: cfg.task.depth, modulus: cfg.task.modulus });
        };
        let ds = load_dataset(path, cfg.task.modulus).with_context(|| format!("loading {}", path.display()))?;
        if let Some(e) = ds.errors.first() {
            bail!("{}: {} ({})", path.display(), e, ds.summary());
        }
        if ds.instances.is_empty() {
            bail!("{}: no training instances", path.display());
        }
        for (i, t) in ds.instances.iter().enumerate() {
            cfg.sampling
                .check_prompt(t.prompt_tokens.len())
                .with_context(|| format!("{}: instance {}", path.display(), i + 1))?;
        }
        Ok(Self::Dataset { seed: cfg.seed, instances: ds.instances })
    }

    pub fn batch(&self, iteration: u64, size: usize) -> Result<Vec<TaskInstance>> {
        match self {
            Self::Generated { seed, depth, modulus } => (0..size)
                .map(|i| Ok(generate_task(substream_seed(*seed, "train-task", &[iteration, i as u64]), *depth, *modulus)?))
                .collect(),
            Self::Dataset { seed, instances: all } => {
                let mut rng = substream(*seed, "train-batch", &[iteration]);
                Ok((0..size).map(|_| all[rng.gen_range(0..all.len())].clone()).collect())
            }
        }
    }
}

/// Held-out evaluation tasks (disjoint label from the training stream).
pub fn eval_tasks(cfg: &RunConfig) -> Result<Vec<TaskInstance>> {
    if let Some(path) = &cfg.task.eval_dataset {
        let ds = load_dataset(path, cfg.task.modulus).with_context(|| format!("loading {}", path.display()))?;
        if let Some(e) = ds.errors.first() {
            bail!("{}: {} ({})", path.display(), e, ds.summary());
        }
        return Ok(ds.instances);
    }
    (0..cfg.task.eval_tasks)
        .map(|i| Ok(generate_task(substream_seed(cfg.task.eval_seed, "eval-task", &[i as u64]), cfg.task.depth, cfg.task.modulus)?))
        .collect()
}

/// Adapter bank freshly drawn for `params`, wrapped into a training state.
pub fn state_for_base(cfg: &RunConfig, params: ModelParams) -> Result<TrainState> {
    let bank = AdapterBank::init(cfg.pte.clone(), &params, &mut substream(cfg.seed, "adapter-init", &[]))?;
    Ok(TrainState::new(params, bank, &cfg.train, cfg.seed)?)
}

/// Random base model, supervised warm start, fresh adapter bank.
pub fn initial_state(cfg: &RunConfig, progress: Progress) -> Result<TrainState> {
    let mut params = ModelParams::init(cfg.model.clone(), &mut substream(cfg.seed, "model-init", &[]))?;
    if cfg.pretrain.steps > 0 {
        let every = (cfg.pretrain.steps / 10).max(1);
        pretrain(&mut params, &cfg.pretrain, cfg.task.modulus, substream_seed(cfg.seed, "pretrain", &[]), |step, loss| {
            if (step + 1) % every == 0 {
                progress(&format!("pretrain step {}/{}: loss {loss:.4}", step + 1, cfg.pretrain.steps));
            }
        })?;
    }
    state_for_base(cfg, params)
}

/// Reward-plateau early stopping on a moving average of the mean score.
pub struct Plateau {
    window: usize,
    patience: Option<u64>,
    min_delta: f64,
    scores: Vec<f64>,
    best: f64,
    since_best: u64,
}

impl Plateau {
    pub fn new(cfg: &RunConfig) -> Self {
        let s = &cfg.schedule;
        Self { window: s.plateau_window, patience: s.early_stop_patience, min_delta: s.min_delta, scores: Vec::new(), best: f64::NEG_INFINITY, since_best: 0 }
    }

    /// Records one iteration; true when training should stop.
    pub fn observe(&mut self, mean_score: f64) -> bool {
        self.scores.push(mean_score);
        let tail = &self.scores[self.scores.len().saturating_sub(self.window)..];
        let avg = tail.iter().sum::<f64>() / tail.len() as f64;
        if avg > self.best + self.min_delta {
            self.best = avg;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        matches!(self.patience, Some(p) if self.scores.len() >= self.window && self.since_best >= p)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Every metrics record of the run, including ones before a resume.
    pub metrics: Vec<StepMetrics>,
    pub stopped_early: bool,
}

fn snapshot(state: &TrainState, cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(Checkpoint { state: state.clone(), train_base: cfg.train.train_base, run_config: serde_json::to_value(cfg)? })
}

fn read_metrics(path: &Path, upto: u64) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if m.iteration <= upto {
            out.push(m);
        }
    }
    Ok(out)
}

fn write_metrics(path: &Path, records: &[StepMetrics]) -> Result<File> {
    let mut f = File::create(path)?;
    for m in records {
        writeln!(f, "{}", serde_json::to_string(m)?)?;
    }
    Ok(f)
}

/// Runs `train` in `cfg.out_dir`. With `resume`, continues from
/// `checkpoints/latest.ckpt`; with `base`, skips the warm start and adapts
/// the given model.
pub fn cmd_train(cfg: &RunConfig, resume: bool, base: Option<ModelParams>, progress: Progress) -> Result<TrainOutcome> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let dir = RunDir::new(&cfg.out_dir)?;
    echo(cfg, &cfg.out_dir)?;
    let source = TaskSource::from_config(cfg)?;
    if let TaskSource::Generated { depth, .. } = source {
        cfg.sampling.check_prompt(pte_core::tasks::prompt_len(depth)).context("sampling.window")?;
    }

    let (mut state, mut history) = if resume {
        let path = dir.checkpoint("latest.ckpt");
        let ck = checkpoint::load(&path).with_context(|| format!("resuming from {}", path.display()))?;
        if ck.state.params.config != cfg.model || ck.state.bank.config != cfg.pte || ck.train_base != cfg.train.train_base {
            bail!("{} was written with a different model, adapter or train_base setting", path.display());
        }
        if ck.state.seed != cfg.seed {
            bail!("{} belongs to seed {}, config has seed {}", path.display(), ck.state.seed, cfg.seed);
        }
        let history = read_metrics(&dir.metrics(), ck.state.iteration)?;
        if history.len() as u64 != ck.state.iteration {
            bail!("metrics.jsonl holds {} records up to iteration {}", history.len(), ck.state.iteration);
        }
        progress(&format!("resuming at iteration {}", ck.state.iteration));
        (ck.state, history)
    } else {
        let state = match base {
            Some(p) => state_for_base(cfg, p)?,
            None => initial_state(cfg, progress)?,
        };
        checkpoint::save(&snapshot(&state, cfg)?, &dir.checkpoint("init.ckpt"))?;
        (state, Vec::new())
    };
    let mut log = write_metrics(&dir.metrics(), &history)?;
    let mut plateau = Plateau::new(cfg);
    let mut stopped_early = history.iter().any(|m| plateau.observe(m.mean_score));

    while !stopped_early && (state.iteration as usize) < cfg.train.iterations {
        let tasks = source.batch(state.iteration, cfg.train.batch_size)?;
        let m = train_step(&mut state, &tasks, &cfg.train, &cfg.sampling)
            .with_context(|| format!("iteration {}", state.iteration + 1))?;
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        log.flush()?;
        progress(&format!(
            "iter {}: score {:.3} kl {:.4} loss {:.4} |g| {:.3} evictions {}",
            m.iteration, m.mean_score, m.mean_kl, m.loss, m.grad_norm, m.evictions
        ));
        stopped_early = plateau.observe(m.mean_score);
        history.push(m);
        let every = cfg.schedule.checkpoint_every;
        if every > 0 && state.iteration % every == 0 {
            let ck = snapshot(&state, cfg)?;
            checkpoint::save(&ck, &dir.checkpoint(&format!("iter_{}.ckpt", state.iteration)))?;
            checkpoint::save(&ck, &dir.checkpoint("latest.ckpt"))?;
        }
    }
    if stopped_early {
        progress(&format!("reward plateau: stopping at iteration {}", state.iteration));
    }
    let ck = snapshot(&state, cfg)?;
    checkpoint::save(&ck, &dir.checkpoint("final.ckpt"))?;
    checkpoint::save(&ck, &dir.checkpoint("latest.ckpt"))?;
    Ok(TrainOutcome { state, metrics: history, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_needs_a_full_window_and_patience() {
        let cfg = RunConfig {
            schedule: crate::config::ScheduleConfig { early_stop_patience: Some(3), plateau_window: 2, min_delta: 0.01, checkpoint_every: 0 },
            ..RunConfig::default()
        };
        let mut p = Plateau::new(&cfg);
        let stops: Vec<bool> = [0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3].iter().map(|&s| p.observe(s)).collect();
        // Moving averages .1 .15 .25 .3 .3 .3 .3: the last improvement is at the
        // fourth score, and three flat iterations later training stops.
        assert_eq!(stops, [false, false, false, false, false, false, true]);
        let mut never = Plateau::new(&RunConfig::default());
        assert!((0..100).all(|_| !never.observe(0.5)));
    }

    #[test]
    fn generated_batches_are_reproducible() {
        let s = TaskSource::Generated { seed: 4, depth: 2, modulus: 5 };
        assert_eq!(s.batch(3, 4).unwrap(), s.batch(3, 4).unwrap());
        assert_ne!(s.batch(3, 4).unwrap(), s.batch(4, 4).unwrap());
    }
}
