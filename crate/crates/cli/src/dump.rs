//! `rollout-dump`: sampled trajectories as JSONL for offline inspection.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pte_core::rng::substream_seed;
use pte_core::rollout::{rollout, SamplingConfig, Trajectory};
use pte_core::tasks::{score, Vocabulary};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{echo, RunConfig};
use crate::lock::DirLock;
use crate::train::eval_tasks;

#[derive(Serialize)]
struct Record<'a> {
    task: usize,
    sample: usize,
    prompt_text: String,
    response_text: String,
    gold_answer_text: String,
    score: f64,
    evictions: usize,
    trajectory: &'a Trajectory,
}

/// Writes `rollouts.jsonl` into the output directory and returns its path.
pub fn cmd_dump(cfg: &RunConfig, ckpt: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ck = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    echo(cfg, &cfg.out_dir)?;
    let tasks: Vec<_> = eval_tasks(cfg)?.into_iter().take(cfg.dump.tasks).collect();
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|i| (0..cfg.dump.samples_per_task).map(move |j| (i, j))).collect();
    let trajs: Vec<Trajectory> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let sc = SamplingConfig { seed: substream_seed(cfg.seed, "dump", &[i as u64, j as u64]), ..cfg.sampling.clone() };
            sc.check_prompt(tasks[i].prompt_tokens.len()).with_context(|| format!("task {i}"))?;
            Ok(rollout(&ck.state.params, &ck.state.bank, &tasks[i].prompt_tokens, &sc)?)
        })
        .collect::<Result<_>>()?;
    let vocab = Vocabulary::default();
    let path = cfg.out_dir.join("rollouts.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for (&(i, j), t) in jobs.iter().zip(&trajs) {
        let rec = Record {
            task: i,
            sample: j,
            prompt_text: vocab.render(&t.prompt_tokens),
            response_text: vocab.render(&t.generated_tokens),
            gold_answer_text: vocab.render(&tasks[i].gold_answer_tokens),
            score: score(&t.generated_tokens, &tasks[i]),
            evictions: t.replay.events.len(),
            trajectory: t,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(path)
}
