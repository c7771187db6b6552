//! Cache-constrained sampling and exact replay of sampled trajectories.
//!
//! A rollout prefills the prompt as question tokens, then alternates
//! sampling, eviction (when the cache is full and a token must be appended)
//! and decoding. Every eviction is logged; replay follows that log instead of
//! re-deciding saturation, so log-probabilities can be recomputed under new
//! parameters on exactly the sampled context schedule.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, EvictedSegment, EvictionEvent, KVCache, ReplayDescriptor, TokenRole};
use crate::error::{Error, Result};
use crate::model::{
    effective_projections, forward_chunk, AdapterOverlay, BoundModel, CacheView, Decoder, ModelConfig, ModelParams,
    TokenId,
};
use crate::numerics::{Eager, Matrix, RopeTable, TensorOps};
use crate::numerics::kernels::log_softmax_rows;
use crate::pte::{AdapterBank, BoundBank, PteRuntime, PteSession};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub window: usize,
    pub eviction_ratio: f64,
    #[serde(default)]
    pub sink_tokens: usize,
    /// Argmax instead of sampling.
    #[serde(default)]
    pub greedy: bool,
    /// Generation ends after this token is emitted.
    #[serde(default)]
    pub stop_token: Option<TokenId>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 64,
            window: 256,
            eviction_ratio: 0.25,
            sink_tokens: 0,
            greedy: false,
            stop_token: None,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig { window: self.window, eviction_ratio: self.eviction_ratio, sink_tokens: self.sink_tokens }
    }

    pub fn validate(&self) -> Result<()> {
        self.cache_config().validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be finite and > 0, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Prompt-dependent checks: the prompt must fit, and when more than one
    /// token is generated there must be room for at least one thinking entry.
    pub fn check_prompt(&self, prompt_len: usize) -> Result<()> {
        if prompt_len == 0 {
            return Err(Error::Contract("empty prompt".into()));
        }
        if prompt_len > self.window || (self.max_new_tokens > 1 && prompt_len == self.window) {
            return Err(Error::Config(format!(
                "window {} cannot hold a {prompt_len}-token prompt plus generated tokens",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_tokens: Vec<TokenId>,
    pub generated_tokens: Vec<TokenId>,
    /// Behaviour log-probability of each generated token.
    pub logprobs: Vec<f64>,
    pub replay: ReplayDescriptor,
    pub temperature: f64,
    /// The stop token was emitted (as opposed to hitting the length cap).
    pub finished: bool,
    pub seed: u64,
}

impl Trajectory {
    /// `(generation step, evicted positions)` per eviction. Step `t` is the
    /// step that appended generated token `t`.
    pub fn eviction_log(&self) -> Vec<(usize, &[usize])> {
        let p = self.prompt_tokens.len();
        self.replay.events.iter().map(|e| (e.at_position - p, e.evicted.as_slice())).collect()
    }

    /// Tokens fed through the model: the prompt and every generated token but
    /// the last (which was sampled and never appended).
    pub fn stream(&self) -> Vec<TokenId> {
        let mut s = self.prompt_tokens.clone();
        s.extend_from_slice(&self.generated_tokens[..self.generated_tokens.len().saturating_sub(1)]);
        s
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

fn scaled_log_softmax(logits: &Matrix, temperature: f64) -> Matrix {
    if temperature == 1.0 {
        log_softmax_rows(logits)
    } else {
        log_softmax_rows(&logits.scale(1.0 / temperature))
    }
}

fn choose<R: Rng>(logp: &[f64], greedy: bool, rng: &mut R) -> TokenId {
    if greedy {
        // First maximum, so ties resolve to the lowest id.
        let mut best = 0;
        for (i, v) in logp.iter().enumerate() {
            if *v > logp[best] {
                best = i;
            }
        }
        return best;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, v) in logp.iter().enumerate() {
        let p = v.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Samples one trajectory under the cache-constrained policy.
pub fn rollout(params: &ModelParams, bank: &AdapterBank, prompt: &[TokenId], cfg: &SamplingConfig) -> Result<Trajectory> {
    cfg.validate()?;
    cfg.check_prompt(prompt.len())?;
    let c = &params.config;
    let mut cache = KVCache::new(c.n_layers, c.d_model, cfg.cache_config())?;
    let mut session = PteSession::start(bank, params)?;
    let mut decoder = Decoder::new(params, session.overlay())?;
    let mut rng = substream(cfg.seed, "rollout", &[]);

    let prefill = decoder.run(prompt, &mut cache, TokenRole::Question)?;
    let mut logits = Matrix::row_vector(prefill.row(prefill.rows() - 1));
    let mut generated = Vec::new();
    let mut logprobs = Vec::new();
    let mut finished = false;
    for step in 0..cfg.max_new_tokens {
        if !logits.is_finite() {
            return Err(Error::NonFinite(format!("logits at generation step {step}")));
        }
        let logp = scaled_log_softmax(&logits, cfg.temperature);
        let token = choose(logp.data(), cfg.greedy, &mut rng);
        generated.push(token);
        logprobs.push(logp.get(0, token));
        if cfg.stop_token == Some(token) {
            finished = true;
            break;
        }
        if step + 1 == cfg.max_new_tokens {
            break;
        }
        if cache.saturated() {
            let segment = cache.evict()?;
            decoder.set_overlay(session.on_eviction(&segment)?)?;
        }
        logits = Matrix::row_vector(&decoder.step(token, &mut cache, TokenRole::Thinking)?);
    }
    Ok(Trajectory {
        prompt_tokens: prompt.to_vec(),
        generated_tokens: generated,
        logprobs,
        replay: cache.snapshot_for_replay(),
        temperature: cfg.temperature,
        finished,
        seed: cfg.seed,
    })
}

/// Checks a trajectory's replay descriptor against its own token counts and
/// against the eviction rule, returning the chunk boundaries of the stream.
fn replay_plan(traj: &Trajectory) -> Result<Vec<(usize, usize, Option<&EvictionEvent>)>> {
    let d = &traj.replay;
    let p = traj.prompt_tokens.len();
    let stream_len = p + traj.generated_tokens.len().saturating_sub(1);
    if traj.generated_tokens.is_empty() || traj.logprobs.len() != traj.generated_tokens.len() {
        return Err(Error::Replay(format!(
            "{} generated tokens with {} log-probs",
            traj.generated_tokens.len(),
            traj.logprobs.len()
        )));
    }
    if d.question_tokens != p || d.next_position != stream_len {
        return Err(Error::Replay(format!(
            "descriptor covers {} question tokens and {} positions; trajectory has {p} and {stream_len}",
            d.question_tokens, d.next_position
        )));
    }
    d.cache_config().validate().map_err(|e| Error::Replay(e.to_string()))?;
    if p > d.window {
        return Err(Error::Replay(format!("prompt of {p} tokens exceeds window {}", d.window)));
    }
    let mut plan = Vec::new();
    let mut start = 0;
    let mut bound = p;
    for ev in &d.events {
        if ev.at_position < bound.max(p) || ev.at_position >= stream_len {
            return Err(Error::Replay(format!("eviction at position {} out of order or range", ev.at_position)));
        }
        if ev.at_position > start {
            plan.push((start, ev.at_position, None));
        }
        plan.push((ev.at_position, ev.at_position, Some(ev)));
        start = ev.at_position;
        bound = ev.at_position + 1;
    }
    if stream_len > start {
        plan.push((start, stream_len, None));
    }
    Ok(plan)
}

/// Per-layer cached keys/values during replay.
struct ReplayCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    positions: Vec<usize>,
    questions: Vec<bool>,
}

/// Replays `traj` on any evaluator and returns the `n × 1` column of
/// log-probabilities of its generated tokens. Evicted keys and values enter
/// the context state as constants.
pub fn replay_logprobs<O: TensorOps>(
    ops: &mut O,
    config: &ModelConfig,
    rope: &Arc<RopeTable>,
    model: &BoundModel<O::T>,
    bank: BoundBank<O::T>,
    traj: &Trajectory,
) -> Result<O::T> {
    replay_inner(ops, config, rope, model, bank, traj, None).map(|(col, _)| col)
}

/// As [`replay_logprobs`], but the context state absorbs the given evicted
/// rows instead of the ones recomputed under the current parameters. Finite
/// differences through this function see the same stop-gradient as the
/// analytic replay. Also returns the segments actually absorbed.
#[allow(clippy::too_many_arguments)]
pub fn replay_logprobs_with_segments<O: TensorOps>(
    ops: &mut O,
    config: &ModelConfig,
    rope: &Arc<RopeTable>,
    model: &BoundModel<O::T>,
    bank: BoundBank<O::T>,
    traj: &Trajectory,
    frozen: Option<&[EvictedSegment]>,
) -> Result<(O::T, Vec<EvictedSegment>)> {
    replay_inner(ops, config, rope, model, bank, traj, frozen)
}

fn replay_inner<O: TensorOps>(
    ops: &mut O,
    config: &ModelConfig,
    rope: &Arc<RopeTable>,
    model: &BoundModel<O::T>,
    bank: BoundBank<O::T>,
    traj: &Trajectory,
    frozen: Option<&[EvictedSegment]>,
) -> Result<(O::T, Vec<EvictedSegment>)> {
    if let Some(f) = frozen {
        if f.len() != traj.replay.events.len() {
            return Err(Error::Replay(format!("{} frozen segments for {} evictions", f.len(), traj.replay.events.len())));
        }
    }
    let mut absorbed = Vec::new();
    let plan = replay_plan(traj)?;
    let d = &traj.replay;
    let cache_cfg = d.cache_config();
    let p = traj.prompt_tokens.len();
    let stream = traj.stream();
    let mut full = stream.clone();
    full.push(*traj.generated_tokens.last().expect("checked non-empty"));

    let mut runtime = PteRuntime::start(ops, bank, model)?;
    let mut overlay = runtime.overlay(ops)?;
    let mut projections = effective_projections(ops, model, &overlay)?;
    let empty = ops.constant(Matrix::zeros(0, config.d_model));
    let mut cache = ReplayCache {
        keys: vec![empty.clone(); config.n_layers],
        values: vec![empty; config.n_layers],
        positions: Vec::new(),
        questions: Vec::new(),
    };
    let mut columns = Vec::new();
    for (start, end, event) in plan {
        if let Some(ev) = event {
            if cache.positions.len() != d.window {
                return Err(Error::Replay(format!(
                    "eviction logged at position {} with {} of {} entries cached",
                    ev.at_position,
                    cache.positions.len(),
                    d.window
                )));
            }
            let expected: Vec<usize> = cache
                .positions
                .iter()
                .zip(&cache.questions)
                .filter(|(pos, q)| !**q && **pos >= cache_cfg.sink_tokens)
                .map(|(pos, _)| *pos)
                .take(cache_cfg.eviction_count())
                .collect();
            if expected != ev.evicted {
                return Err(Error::Replay(format!(
                    "eviction at position {} removed {:?}, the window rule selects {:?}",
                    ev.at_position, ev.evicted, expected
                )));
            }
            let (evict_slots, keep_slots): (Vec<usize>, Vec<usize>) =
                (0..cache.positions.len()).partition(|&s| ev.evicted.contains(&cache.positions[s]));
            let mut seg_k = Vec::with_capacity(config.n_layers);
            let mut seg_v = Vec::with_capacity(config.n_layers);
            for l in 0..config.n_layers {
                seg_k.push(ops.gather_rows(&cache.keys[l], &evict_slots)?);
                seg_v.push(ops.gather_rows(&cache.values[l], &evict_slots)?);
                cache.keys[l] = ops.gather_rows(&cache.keys[l], &keep_slots)?;
                cache.values[l] = ops.gather_rows(&cache.values[l], &keep_slots)?;
            }
            cache.positions = keep_slots.iter().map(|&s| cache.positions[s]).collect();
            cache.questions = keep_slots.iter().map(|&s| cache.questions[s]).collect();
            if let Some(f) = frozen {
                let seg = &f[absorbed.len()];
                if seg.keys.len() != config.n_layers
                    || seg.keys.iter().chain(&seg.values).any(|m| m.shape() != (ev.evicted.len(), config.d_model))
                {
                    return Err(Error::Shape(format!("frozen segment {} does not match eviction shape", absorbed.len())));
                }
                seg_k = seg.keys.iter().map(|m| ops.constant(m.clone())).collect();
                seg_v = seg.values.iter().map(|m| ops.constant(m.clone())).collect();
            }
            absorbed.push(EvictedSegment {
                keys: seg_k.iter().map(|k| ops.value(k).clone()).collect(),
                values: seg_v.iter().map(|v| ops.value(v).clone()).collect(),
                positions: ev.evicted.clone(),
            });
            runtime.absorb(ops, &seg_k, &seg_v)?;
            overlay = runtime.overlay(ops)?;
            projections = effective_projections(ops, model, &overlay)?;
            continue;
        }
        if cache.positions.len() + (end - start) > d.window {
            return Err(Error::Replay(format!(
                "positions {start}..{end} overflow the window of {} without a logged eviction",
                d.window
            )));
        }
        let positions: Vec<usize> = (start..end).collect();
        let out = {
            let view = CacheView {
                keys: cache.keys.iter().collect(),
                values: cache.values.iter().collect(),
                positions: &cache.positions,
            };
            forward_chunk(ops, config, rope, model, &projections, &view, &stream[start..end], &positions)?
        };
        for l in 0..config.n_layers {
            cache.keys[l] = ops.concat_rows(&[&cache.keys[l], &out.keys[l]])?;
            cache.values[l] = ops.concat_rows(&[&cache.values[l], &out.values[l]])?;
        }
        cache.positions.extend(start..end);
        cache.questions.extend((start..end).map(|q| q < p));

        // Row r predicts full[start + r + 1]; only rows from the last prompt token on are scored.
        let first = start.max(p - 1);
        if first < end {
            let rows = ops.slice_rows(&out.logits, first - start, end - start);
            let rows = if traj.temperature == 1.0 { rows } else { ops.scale(&rows, 1.0 / traj.temperature) };
            let logp = ops.log_softmax_rows(&rows);
            let targets: Vec<usize> = (first..end).map(|q| full[q + 1]).collect();
            columns.push(ops.pick(&logp, &targets)?);
        }
    }
    let refs: Vec<&O::T> = columns.iter().collect();
    Ok((ops.concat_rows(&refs)?, absorbed))
}

/// Log-probabilities of the trajectory's tokens under `params` and `bank`,
/// following its logged eviction schedule.
pub fn recompute_logprobs(traj: &Trajectory, params: &ModelParams, bank: &AdapterBank) -> Result<Vec<f64>> {
    bank.validate_for(params)?;
    let mut ops = Eager;
    let model = params.bind(&mut ops);
    let bound = bank.bind(&mut ops);
    let col = replay_logprobs(&mut ops, &params.config, &params.config.rope_table(), &model, bound, traj)?;
    Ok(col.into_data())
}

/// Evicted rows as recomputed under `params` and `bank`, one segment per logged eviction.
pub fn evicted_segments(traj: &Trajectory, params: &ModelParams, bank: &AdapterBank) -> Result<Vec<EvictedSegment>> {
    bank.validate_for(params)?;
    let mut ops = Eager;
    let model = params.bind(&mut ops);
    let bound = bank.bind(&mut ops);
    let (_, segs) = replay_inner(&mut ops, &params.config, &params.config.rope_table(), &model, bound, traj, None)?;
    Ok(segs)
}

/// Log-probabilities with the context state fed `segments` instead of the
/// recomputed evicted rows.
pub fn recompute_logprobs_frozen(
    traj: &Trajectory,
    params: &ModelParams,
    bank: &AdapterBank,
    segments: &[EvictedSegment],
) -> Result<Vec<f64>> {
    bank.validate_for(params)?;
    let mut ops = Eager;
    let model = params.bind(&mut ops);
    let bound = bank.bind(&mut ops);
    let rope = params.config.rope_table();
    let (col, _) = replay_inner(&mut ops, &params.config, &rope, &model, bound, traj, Some(segments))?;
    Ok(col.into_data())
}

/// Log-probabilities of the trajectory's tokens under `ref_params` with the
/// whole stream cached and no weight deltas.
pub fn full_cache_logprobs(traj: &Trajectory, ref_params: &ModelParams) -> Result<Vec<f64>> {
    if traj.generated_tokens.is_empty() {
        return Ok(Vec::new());
    }
    let stream = traj.stream();
    let c = &ref_params.config;
    let mut cache = KVCache::new(c.n_layers, c.d_model, CacheConfig::new(stream.len(), 1.0))?;
    let decoder = Decoder::new(ref_params, &AdapterOverlay::empty(c.n_layers))?;
    let logits = decoder.run(&stream, &mut cache, TokenRole::Question)?;
    let p = traj.prompt_tokens.len();
    let rows = logits.slice_rows(p - 1, stream.len());
    let logp = scaled_log_softmax(&rows, traj.temperature);
    Ok(traj.generated_tokens.iter().enumerate().map(|(i, &t)| logp.get(i, t)).collect())
}
