//! Exact attention-FLOP and cache-size accounting, and run reports.
//!
//! Only the cache-length-dependent work is counted: per layer and head, `q·Kᵀ`
//! and `weights·V` each cost `2·L·d_head` operations for one new token.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::CacheConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rollout::Trajectory;

pub fn attention_flops_step(cache_len: usize, config: &ModelConfig) -> Result<u64> {
    if cache_len == 0 {
        return Err(Error::Contract("attention over an empty cache".into()));
    }
    Ok(4 * (config.n_layers * config.n_heads * config.d_head * cache_len) as u64)
}

/// Keys plus values held across all layers.
pub fn cache_elements(cache_len: usize, config: &ModelConfig) -> u64 {
    2 * (config.n_layers * cache_len * config.d_model) as u64
}

/// Cache length `L_t` of the decode step that writes generated token `t`
/// (1-based) into the cache and attends over it. A run of `T` tokens is
/// charged `T` steps; the last token's step is counted even though sampling
/// stops before it runs, so full-cache lengths are `prompt + t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSchedule {
    pub cache_lengths: Vec<usize>,
}

/// Entries as `(position, is_question)` in slot order.
struct Occupancy {
    entries: Vec<(usize, bool)>,
    cache: CacheConfig,
}

impl Occupancy {
    fn new(prompt_len: usize, cache: &CacheConfig) -> Result<Self> {
        cache.validate()?;
        if prompt_len > cache.window {
            return Err(Error::Config(format!("window {} cannot hold a {prompt_len}-token prompt", cache.window)));
        }
        Ok(Self { entries: (0..prompt_len).map(|p| (p, true)).collect(), cache: *cache })
    }

    fn evict_by_rule(&mut self) -> Result<()> {
        let sink = self.cache.sink_tokens;
        let victims: Vec<usize> = self
            .entries
            .iter()
            .filter(|(p, q)| !q && *p >= sink)
            .map(|(p, _)| *p)
            .take(self.cache.eviction_count())
            .collect();
        if victims.is_empty() {
            return Err(Error::OnlyQuestionTokens { window: self.cache.window });
        }
        self.entries.retain(|(p, _)| !victims.contains(p));
        Ok(())
    }

    fn append(&mut self, position: usize) -> usize {
        self.entries.push((position, false));
        self.entries.len()
    }
}

impl DecodeSchedule {
    pub fn full_cache(prompt_len: usize, generated: usize) -> Self {
        Self { cache_lengths: (1..=generated).map(|t| prompt_len + t).collect() }
    }

    /// Occupancy under the windowed policy without running a model: thinking
    /// entries are evicted by the window rule whenever an append meets a full cache.
    pub fn windowed(prompt_len: usize, generated: usize, cache: &CacheConfig) -> Result<Self> {
        let mut occ = Occupancy::new(prompt_len, cache)?;
        let mut out = Vec::with_capacity(generated);
        for t in 0..generated {
            if occ.entries.len() == cache.window {
                occ.evict_by_rule()?;
            }
            out.push(occ.append(prompt_len + t));
        }
        Ok(Self { cache_lengths: out })
    }

    /// Lengths replayed from a trajectory's eviction log; the final token's
    /// step, which sampling never ran, follows the window rule.
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        let p = traj.prompt_tokens.len();
        let d = &traj.replay;
        let mut occ = Occupancy::new(p, &d.cache_config())?;
        let n = traj.generated_tokens.len();
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let pos = p + t;
            if t + 1 < n {
                for ev in d.events.iter().filter(|e| e.at_position == pos) {
                    occ.entries.retain(|(q, _)| !ev.evicted.contains(q));
                }
            } else if occ.entries.len() == d.window {
                occ.evict_by_rule()?;
            }
            out.push(occ.append(pos));
        }
        Ok(Self { cache_lengths: out })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub steps: usize,
    pub max_attention_flops: u64,
    pub mean_attention_flops: f64,
    pub max_cache_elements: u64,
    pub mean_cache_elements: f64,
}

impl EfficiencyReport {
    pub fn from_schedule(schedule: &DecodeSchedule, config: &ModelConfig) -> Result<Self> {
        Self::aggregate(std::slice::from_ref(schedule), config)
    }

    /// Per-step statistics pooled over several schedules.
    pub fn aggregate(schedules: &[DecodeSchedule], config: &ModelConfig) -> Result<Self> {
        let mut r = EfficiencyReport::default();
        let (mut fsum, mut csum) = (0u128, 0u128);
        for s in schedules {
            for &l in &s.cache_lengths {
                let f = attention_flops_step(l, config)?;
                let c = cache_elements(l, config);
                r.max_attention_flops = r.max_attention_flops.max(f);
                r.max_cache_elements = r.max_cache_elements.max(c);
                fsum += f as u128;
                csum += c as u128;
                r.steps += 1;
            }
        }
        if r.steps > 0 {
            r.mean_attention_flops = fsum as f64 / r.steps as f64;
            r.mean_cache_elements = csum as f64 / r.steps as f64;
        }
        Ok(r)
    }
}

/// One row of an evaluation or sweep report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub axis: String,
    pub value: f64,
    pub window: usize,
    pub eviction_ratio: f64,
    pub global_tokens: usize,
    pub tasks: usize,
    pub skipped: usize,
    pub success_rate: f64,
    pub max_attention_flops: u64,
    pub mean_attention_flops: f64,
    pub max_cache_elements: u64,
    pub mean_cache_elements: f64,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "label",
    "axis",
    "value",
    "window",
    "eviction_ratio",
    "global_tokens",
    "tasks",
    "skipped",
    "success_rate",
    "max_attention_flops",
    "mean_attention_flops",
    "max_cache_elements",
    "mean_cache_elements",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv or json)"))),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(runs: &[RunRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in runs {
        let fields = [
            csv_field(&r.label),
            csv_field(&r.axis),
            r.value.to_string(),
            r.window.to_string(),
            r.eviction_ratio.to_string(),
            r.global_tokens.to_string(),
            r.tasks.to_string(),
            r.skipped.to_string(),
            r.success_rate.to_string(),
            r.max_attention_flops.to_string(),
            r.mean_attention_flops.to_string(),
            r.max_cache_elements.to_string(),
            r.mean_cache_elements.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_report(runs: &[RunRecord], path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => render_csv(runs),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(runs)?;
            s.push('\n');
            s
        }
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    f.flush()?;
    Ok(())
}
