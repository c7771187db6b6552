//! Token-at-a-time decoding over an explicit entry list, with its own
//! eviction rule and adapter state.

use pte_core::model::{ModelParams, PositionMode};
use pte_core::pte::AdapterBank;
use pte_core::rollout::{SamplingConfig, Trajectory};

use crate::forward::{apply, attend_heads, log_softmax, rms, rotate, Dense, Rows};
use crate::state::OracleAdapters;
use crate::OracleError;

#[derive(Clone, Debug)]
struct Entry {
    position: usize,
    question: bool,
    /// Per layer, before any rotation.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Windowed decoder used as ground truth for rollouts and replay.
#[derive(Clone, Debug)]
pub struct OracleDecoder {
    model: Dense,
    adapters: OracleAdapters,
    deltas: Vec<[Option<Rows>; 3]>,
    entries: Vec<Entry>,
    window: usize,
    eviction_ratio: f64,
    sink_tokens: usize,
    next_position: usize,
}

impl OracleDecoder {
    pub fn new(params: &ModelParams, bank: &AdapterBank, window: usize, eviction_ratio: f64, sink_tokens: usize) -> Self {
        let model = Dense::new(params);
        let adapters = OracleAdapters::start(bank, &model);
        let deltas = adapters.deltas(model.config.n_layers);
        Self { model, adapters, deltas, entries: Vec::new(), window, eviction_ratio, sink_tokens, next_position: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn saturated(&self) -> bool {
        self.entries.len() >= self.window
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn adapter_states(&self) -> Vec<Rows> {
        self.adapters.states()
    }

    fn weight(&self, layer: usize, which: usize) -> Rows {
        let mut w = self.model.weights[layer][which].clone();
        if let Some(d) = &self.deltas[layer][which] {
            for (r, dr) in w.iter_mut().zip(d) {
                for (x, y) in r.iter_mut().zip(dr) {
                    *x += y;
                }
            }
        }
        w
    }

    /// Feeds one token, caches its keys and values, and returns its logits.
    pub fn step(&mut self, token: usize, question: bool) -> Vec<f64> {
        let c = self.model.config.clone();
        let slot = self.entries.len();
        let query_pos = match c.position_mode {
            PositionMode::Absolute => self.next_position,
            PositionMode::CacheSlot => slot,
        };
        let mut x = self.model.embedding[token].clone();
        let mut new_keys = Vec::new();
        let mut new_values = Vec::new();
        for l in 0..c.n_layers {
            let h = rms(&x, &self.model.attn_gain[l], c.norm_eps);
            let q = apply(&self.weight(l, 0), &h);
            let k = apply(&self.weight(l, 1), &h);
            let v = apply(&self.weight(l, 2), &h);
            let mut keys = Vec::with_capacity(slot + 1);
            let mut values = Vec::with_capacity(slot + 1);
            for (s, e) in self.entries.iter().enumerate() {
                let pos = match c.position_mode {
                    PositionMode::Absolute => e.position,
                    PositionMode::CacheSlot => s,
                };
                keys.push(rotate(&e.keys[l], pos, &c));
                values.push(e.values[l].clone());
            }
            keys.push(rotate(&k, query_pos, &c));
            values.push(v.clone());
            let a = attend_heads(&rotate(&q, query_pos, &c), &keys, &values, &c);
            let o = apply(&self.model.weights[l][3], &a);
            for j in 0..c.d_model {
                x[j] += o[j];
            }
            let f = self.model.ffn(l, &x);
            for j in 0..c.d_model {
                x[j] += f[j];
            }
            new_keys.push(k);
            new_values.push(v);
        }
        self.entries.push(Entry { position: self.next_position, question, keys: new_keys, values: new_values });
        self.next_position += 1;
        self.model.logits(&x)
    }

    /// Positions the window rule would remove now.
    pub fn rule_positions(&self) -> Vec<usize> {
        let n = ((self.eviction_ratio * self.window as f64 - 1e-9).ceil() as usize).max(1);
        self.entries
            .iter()
            .filter(|e| !e.question && e.position >= self.sink_tokens)
            .take(n)
            .map(|e| e.position)
            .collect()
    }

    /// Removes the given cached positions and folds them into the adapters.
    pub fn evict(&mut self, positions: &[usize]) -> Result<(), OracleError> {
        self.evict_substituting(positions, None)
    }

    /// Removes the positions but folds `substitute` (per-layer keys and
    /// values) into the adapters instead of the removed rows.
    pub fn evict_substituting(&mut self, positions: &[usize], substitute: Option<(&[Rows], &[Rows])>) -> Result<(), OracleError> {
        let n_layers = self.model.config.n_layers;
        let mut keys: Vec<Rows> = vec![Vec::new(); n_layers];
        let mut values: Vec<Rows> = vec![Vec::new(); n_layers];
        for p in positions {
            let e = self
                .entries
                .iter()
                .find(|e| e.position == *p)
                .ok_or_else(|| format!("position {p} is not cached"))?;
            if e.question {
                return Err(format!("position {p} is a question token"));
            }
        }
        let mut kept = Vec::new();
        for e in self.entries.drain(..) {
            if positions.contains(&e.position) {
                for l in 0..n_layers {
                    keys[l].push(e.keys[l].clone());
                    values[l].push(e.values[l].clone());
                }
            } else {
                kept.push(e);
            }
        }
        self.entries = kept;
        match substitute {
            Some((k, v)) => self.adapters.absorb(k, v),
            None => self.adapters.absorb(&keys, &values),
        }
        self.deltas = self.adapters.deltas(n_layers);
        Ok(())
    }

    /// Feeds the prompt and returns the logits after its last token.
    pub fn prefill(&mut self, prompt: &[usize]) -> Result<Vec<f64>, OracleError> {
        if prompt.is_empty() || prompt.len() > self.window {
            return Err(format!("prompt of {} tokens for window {}", prompt.len(), self.window));
        }
        let mut last = Vec::new();
        for &t in prompt {
            last = self.step(t, true);
        }
        Ok(last)
    }
}

/// Every completion the sampler can produce, with its exact probability.
/// Completions end at the stop token or after `max_new_tokens`. Refuses trees
/// with more than 10⁴ leaves.
pub fn enumerate_trajectory_distribution(
    params: &ModelParams,
    bank: &AdapterBank,
    prompt: &[usize],
    cfg: &SamplingConfig,
) -> Result<Vec<(Vec<usize>, f64)>, OracleError> {
    let vocab = params.config.vocab_size;
    let leaves = (vocab as f64).powi(cfg.max_new_tokens as i32);
    if leaves > 1e4 {
        return Err(format!("{vocab}^{} completions is too many to enumerate", cfg.max_new_tokens));
    }
    let mut dec = OracleDecoder::new(params, bank, cfg.window, cfg.eviction_ratio, cfg.sink_tokens);
    let logits = dec.prefill(prompt)?;
    let mut out = Vec::new();
    expand(&dec, &logits, &mut Vec::new(), 0.0, cfg, &mut out)?;
    Ok(out)
}

fn expand(
    dec: &OracleDecoder,
    logits: &[f64],
    prefix: &mut Vec<usize>,
    logp: f64,
    cfg: &SamplingConfig,
    out: &mut Vec<(Vec<usize>, f64)>,
) -> Result<(), OracleError> {
    let lp = log_softmax(logits, cfg.temperature);
    for (tok, l) in lp.iter().enumerate() {
        prefix.push(tok);
        let total = logp + l;
        if cfg.stop_token == Some(tok) || prefix.len() == cfg.max_new_tokens {
            out.push((prefix.clone(), total.exp()));
        } else {
            let mut next = dec.clone();
            if next.saturated() {
                let victims = next.rule_positions();
                if victims.is_empty() {
                    return Err("window holds only question tokens".into());
                }
                next.evict(&victims)?;
            }
            let logits = next.step(tok, false);
            expand(&next, &logits, prefix, total, cfg, out)?;
        }
        prefix.pop();
    }
    Ok(())
}

/// Log-probabilities of a trajectory's tokens, decoding one token at a time
/// and applying its logged evictions.
pub fn replay_oracle(traj: &Trajectory, params: &ModelParams, bank: &AdapterBank) -> Result<Vec<f64>, OracleError> {
    replay_oracle_substituting(traj, params, bank, None)
}

/// Replay in which eviction `i` feeds `segments[i]` (per-layer keys, values)
/// to the adapters.
pub fn replay_oracle_substituting(
    traj: &Trajectory,
    params: &ModelParams,
    bank: &AdapterBank,
    segments: Option<&[(Vec<Rows>, Vec<Rows>)]>,
) -> Result<Vec<f64>, OracleError> {
    let mut applied = 0;
    let d = &traj.replay;
    let mut dec = OracleDecoder::new(params, bank, d.window, d.eviction_ratio, d.sink_tokens);
    let mut logits = dec.prefill(&traj.prompt_tokens)?;
    let mut out = Vec::with_capacity(traj.generated_tokens.len());
    for (i, &tok) in traj.generated_tokens.iter().enumerate() {
        out.push(log_softmax(&logits, traj.temperature)[tok]);
        if i + 1 == traj.generated_tokens.len() {
            break;
        }
        let here = dec.next_position();
        for ev in d.events.iter().filter(|e| e.at_position == here) {
            let sub = match segments {
                Some(s) => {
                    let (k, v) = s.get(applied).ok_or("fewer substitute segments than evictions")?;
                    Some((k.as_slice(), v.as_slice()))
                }
                None => None,
            };
            dec.evict_substituting(&ev.evicted, sub)?;
            applied += 1;
        }
        if dec.saturated() {
            return Err(format!("window full at position {} with no logged eviction", dec.next_position()));
        }
        logits = dec.step(tok, false);
    }
    Ok(out)
}
