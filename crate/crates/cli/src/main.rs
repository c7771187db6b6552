use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pte_cli::{config, dump, eval, gradcheck, train};

#[derive(Parser)]
#[command(name = "pte", about = "Cache-constrained decoding with progressive thought encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=20` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Warm start, then GRPO with progressive thought encoding.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from <out>/checkpoints/latest.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy success rate per window on held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Eviction-ratio, window or global-token sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every trainable parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write sampled trajectories as JSONL.
    RolloutDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(c: &Common) -> Result<config::RunConfig> {
    config::load(c.config.as_deref(), &c.set, c.seed, c.out.as_deref())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<bool> {
    pte_cli::init_threads()?;
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let out = train::cmd_train(&cfg, resume, None, &progress)?;
            let last = out.metrics.last().map_or(0.0, |m| m.mean_score);
            println!("trained to iteration {} (last mean score {last:.3})", out.state.iteration);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            for r in eval::cmd_eval(&cfg, &checkpoint, &progress)? {
                println!("window {:>4}: success {:.3} ({} tasks, {} skipped)", r.window, r.success_rate, r.tasks, r.skipped);
            }
        }
        Command::Sweep { common, checkpoint } => {
            let cfg = load(&common)?;
            for r in eval::cmd_sweep(&cfg, &checkpoint, &progress)? {
                println!("{}: success {:.3}, max attention flops {}", r.label, r.success_rate, r.max_attention_flops);
            }
        }
        Command::Gradcheck { common } => {
            let cfg = load(&common)?;
            let report = gradcheck::cmd_gradcheck(&cfg)?;
            std::fs::create_dir_all(cfg.out_dir.join("reports"))?;
            std::fs::write(cfg.out_dir.join("reports/gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!("{report}");
            return Ok(report.passed);
        }
        Command::RolloutDump { common, checkpoint } => {
            let cfg = load(&common)?;
            println!("{}", dump::cmd_dump(&cfg, &checkpoint)?.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
