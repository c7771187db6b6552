//! Bounded per-layer key/value store with question-token retention and
//! sliding-window eviction of thinking tokens.
//!
//! Every layer holds the same entries in the same order; the role and
//! absolute position of entry `i` are shared by all layers. Keys are stored
//! before any rotary transform so an entry carries no slot-dependent state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Question,
    Thinking,
    GlobalReserved,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    /// Capacity `W` in entries per layer.
    pub window: usize,
    /// Fraction of `window` removed per eviction.
    pub eviction_ratio: f64,
    /// Entries whose absolute position is below this bound are never evicted.
    /// Question tokens are always retained regardless of this value.
    #[serde(default)]
    pub sink_tokens: usize,
}

impl CacheConfig {
    pub fn new(window: usize, eviction_ratio: f64) -> Self {
        Self { window, eviction_ratio, sink_tokens: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("cache window must be at least 1".into()));
        }
        if !(self.eviction_ratio > 0.0 && self.eviction_ratio <= 1.0) {
            return Err(Error::Config(format!("eviction_ratio must lie in (0, 1], got {}", self.eviction_ratio)));
        }
        Ok(())
    }

    /// Entries removed per eviction: `max(1, ⌈ρ·W⌉)`.
    pub fn eviction_count(&self) -> usize {
        let n = (self.eviction_ratio * self.window as f64 - 1e-9).ceil() as usize;
        n.clamp(1, self.window)
    }
}

/// One eviction: the stream position about to be appended when it fired and
/// the absolute positions it removed, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub at_position: usize,
    pub evicted: Vec<usize>,
}

/// Occupancy metadata and eviction history, enough to replay the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayDescriptor {
    pub window: usize,
    pub eviction_ratio: f64,
    #[serde(default)]
    pub sink_tokens: usize,
    pub question_tokens: usize,
    pub next_position: usize,
    pub occupancy: usize,
    pub events: Vec<EvictionEvent>,
}

impl ReplayDescriptor {
    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig { window: self.window, eviction_ratio: self.eviction_ratio, sink_tokens: self.sink_tokens }
    }
}

/// Keys and values removed by one eviction, per layer, rows ordered by position.
#[derive(Clone, Debug, PartialEq)]
pub struct EvictedSegment {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub positions: Vec<usize>,
}

impl EvictedSegment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerKv {
    keys: Matrix,
    values: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    config: CacheConfig,
    width: usize,
    layers: Vec<LayerKv>,
    roles: Vec<TokenRole>,
    positions: Vec<usize>,
    next_position: usize,
    question_tokens: usize,
    events: Vec<EvictionEvent>,
}

impl KVCache {
    pub fn new(n_layers: usize, width: usize, config: CacheConfig) -> Result<Self> {
        config.validate()?;
        if n_layers == 0 || width == 0 {
            return Err(Error::Config("cache needs at least one layer and a non-zero width".into()));
        }
        let layer = LayerKv { keys: Matrix::zeros(0, width), values: Matrix::zeros(0, width) };
        Ok(Self {
            config,
            width,
            layers: vec![layer; n_layers],
            roles: Vec::new(),
            positions: Vec::new(),
            next_position: 0,
            question_tokens: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn saturated(&self) -> bool {
        self.len() == self.config.window
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.layers[layer].values
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Absolute position the next appended token receives by default.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn events(&self) -> &[EvictionEvent] {
        &self.events
    }

    /// Appends one `(key, value)` row per layer.
    pub fn append(&mut self, layer_kvs: &[(&[f64], &[f64])], role: TokenRole, position: usize) -> Result<()> {
        if self.saturated() {
            return Err(Error::Contract(format!("append to a saturated cache (window {})", self.config.window)));
        }
        if layer_kvs.len() != self.layers.len() {
            return Err(Error::Shape(format!("append: {} layer rows for {} layers", layer_kvs.len(), self.layers.len())));
        }
        if let Some((k, v)) = layer_kvs.iter().find(|(k, v)| k.len() != self.width || v.len() != self.width) {
            return Err(Error::Shape(format!("append: rows of width {}/{} into width {}", k.len(), v.len(), self.width)));
        }
        if position < self.next_position {
            return Err(Error::Contract(format!("append: position {position} is not after {}", self.next_position)));
        }
        for (layer, (k, v)) in self.layers.iter_mut().zip(layer_kvs) {
            layer.keys.push_row(k)?;
            layer.values.push_row(v)?;
        }
        self.roles.push(role);
        self.positions.push(position);
        if role == TokenRole::Question {
            self.question_tokens += 1;
        }
        self.next_position = position + 1;
        Ok(())
    }

    /// Slots of the entries the next eviction would remove.
    fn eviction_slots(&self) -> Vec<usize> {
        let sink = self.config.sink_tokens;
        self.roles
            .iter()
            .zip(&self.positions)
            .enumerate()
            .filter(|(_, (role, pos))| **role == TokenRole::Thinking && **pos >= sink)
            .map(|(slot, _)| slot)
            .take(self.config.eviction_count())
            .collect()
    }

    /// Removes the oldest evictable thinking entries from a saturated cache.
    pub fn evict(&mut self) -> Result<EvictedSegment> {
        if !self.saturated() {
            return Err(Error::Contract(format!("evict on an unsaturated cache ({}/{})", self.len(), self.config.window)));
        }
        let slots = self.eviction_slots();
        if slots.is_empty() {
            return Err(Error::OnlyQuestionTokens { window: self.config.window });
        }
        Ok(self.remove_slots(&slots))
    }

    fn remove_slots(&mut self, slots: &[usize]) -> EvictedSegment {
        let positions: Vec<usize> = slots.iter().map(|&s| self.positions[s]).collect();
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            keys.push(layer.keys.select_rows(slots));
            values.push(layer.values.select_rows(slots));
            layer.keys.remove_rows(slots);
            layer.values.remove_rows(slots);
        }
        for &s in slots.iter().rev() {
            self.roles.remove(s);
            self.positions.remove(s);
        }
        self.events.push(EvictionEvent { at_position: self.next_position, evicted: positions.clone() });
        EvictedSegment { keys, values, positions }
    }

    /// Removes exactly the recorded positions (used when replaying a logged schedule).
    pub fn evict_positions(&mut self, positions: &[usize]) -> Result<EvictedSegment> {
        let mut slots = Vec::with_capacity(positions.len());
        for p in positions {
            let slot = self
                .positions
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::Replay(format!("position {p} is not cached")))?;
            if self.roles[slot] != TokenRole::Thinking {
                return Err(Error::Replay(format!("position {p} is not a thinking entry")));
            }
            slots.push(slot);
        }
        if slots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Replay("evicted positions are not ascending".into()));
        }
        Ok(self.remove_slots(&slots))
    }

    pub fn snapshot_for_replay(&self) -> ReplayDescriptor {
        ReplayDescriptor {
            window: self.config.window,
            eviction_ratio: self.config.eviction_ratio,
            sink_tokens: self.config.sink_tokens,
            question_tokens: self.question_tokens,
            next_position: self.next_position,
            occupancy: self.len(),
            events: self.events.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn filled(window: usize, ratio: f64, questions: usize, thinking: usize) -> KVCache {
        let mut c = KVCache::new(2, 3, CacheConfig::new(window, ratio)).unwrap();
        for i in 0..questions + thinking {
            let role = if i < questions { TokenRole::Question } else { TokenRole::Thinking };
            let row = [i as f64, 0.5, -(i as f64)];
            c.append(&[(&row, &row), (&row, &row)], role, i).unwrap();
        }
        c
    }

    #[test]
    fn append_and_saturation() {
        let c = KVCache::new(2, 3, CacheConfig::new(8, 0.25)).unwrap();
        assert!(!c.saturated());
        assert!(filled(8, 0.25, 0, 1).len() == 1);
        assert!(filled(8, 0.25, 2, 6).saturated());
        assert!(!filled(8, 0.25, 2, 5).saturated());
    }

    #[test]
    fn append_at_capacity_is_refused() {
        let mut c = filled(4, 0.25, 1, 3);
        let row = [0.0; 3];
        let err = c.append(&[(&row, &row), (&row, &row)], TokenRole::Thinking, 9);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn roles_survive_many_appends() {
        let mut c = KVCache::new(1, 2, CacheConfig::new(128, 0.25)).unwrap();
        let roles: Vec<TokenRole> = (0..100)
            .map(|i| match i % 3 {
                0 => TokenRole::Question,
                1 => TokenRole::Thinking,
                _ => TokenRole::GlobalReserved,
            })
            .collect();
        for (i, r) in roles.iter().enumerate() {
            c.append(&[(&[1.0, 2.0], &[3.0, 4.0])], *r, i).unwrap();
        }
        assert_eq!(c.roles(), roles.as_slice());
        assert_eq!(c.keys(0).rows(), c.values(0).rows());
    }

    #[test]
    fn evicts_the_oldest_thinking_entries() {
        let mut c = filled(8, 0.25, 2, 6);
        let seg = c.evict().unwrap();
        assert_eq!(seg.positions, vec![2, 3]);
        assert_eq!(seg.keys[1].row(0), &[2.0, 0.5, -2.0]);
        assert_eq!(c.len(), 6);
        assert_eq!(c.positions(), &[0, 1, 4, 5, 6, 7]);
        assert_eq!(c.keys(0).row(2), &[4.0, 0.5, -4.0]);
    }

    #[test]
    fn eviction_is_clamped_to_available_thinking_entries() {
        let mut c = filled(8, 0.25, 7, 1);
        let seg = c.evict().unwrap();
        assert_eq!(seg.positions, vec![7]);
        assert_eq!(c.len(), 7);
    }

    #[test]
    fn question_only_cache_cannot_evict() {
        let mut c = filled(4, 0.25, 4, 0);
        assert!(matches!(c.evict(), Err(Error::OnlyQuestionTokens { window: 4 })));
        let mut c = filled(4, 0.25, 1, 1);
        assert!(matches!(c.evict(), Err(Error::Contract(_))));
    }

    #[test]
    fn window_at_batch_question_length_leaves_w_minus_quarter() {
        // Window sized to the longest question in a batch; a shorter question
        // then leaves room for thinking tokens.
        for w in [4usize, 7, 12, 33] {
            let mut c = filled(w, 0.25, 1, w - 1);
            c.evict().unwrap();
            assert_eq!(c.len(), w - (0.25 * w as f64).ceil() as usize);
        }
    }

    #[test]
    fn eviction_count_formula() {
        assert_eq!(CacheConfig::new(8, 0.25).eviction_count(), 2);
        assert_eq!(CacheConfig::new(3, 0.25).eviction_count(), 1);
        assert_eq!(CacheConfig::new(10, 0.05).eviction_count(), 1);
        assert_eq!(CacheConfig::new(20, 0.15).eviction_count(), 3);
        assert_eq!(CacheConfig::new(5, 1.0).eviction_count(), 5);
        assert!(CacheConfig::new(5, 0.0).validate().is_err());
        assert!(CacheConfig::new(0, 0.5).validate().is_err());
    }

    #[test]
    fn sink_override_protects_early_thinking_tokens() {
        let mut c = KVCache::new(1, 1, CacheConfig { window: 6, eviction_ratio: 0.3, sink_tokens: 3 }).unwrap();
        for i in 0..6 {
            let role = if i == 0 { TokenRole::Question } else { TokenRole::Thinking };
            c.append(&[(&[i as f64], &[i as f64])], role, i).unwrap();
        }
        assert_eq!(c.evict().unwrap().positions, vec![3, 4]);
    }

    #[test]
    fn snapshot_of_fresh_cache_has_no_events() {
        let c = KVCache::new(1, 1, CacheConfig::new(4, 0.5)).unwrap();
        let d = c.snapshot_for_replay();
        assert!(d.events.is_empty());
        assert_eq!(d.occupancy, 0);
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let mut c = filled(6, 0.5, 2, 4);
        c.evict().unwrap();
        let d = c.snapshot_for_replay();
        let text = serde_json::to_string(&d).unwrap();
        let back: ReplayDescriptor = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn replaying_recorded_positions_reproduces_the_cache() {
        let mut live = filled(6, 0.5, 2, 4);
        live.evict().unwrap();
        let d = live.snapshot_for_replay();
        let mut replay = filled(6, 0.5, 2, 4);
        for e in &d.events {
            replay.evict_positions(&e.evicted).unwrap();
        }
        assert_eq!(replay, live);
        assert!(matches!(replay.evict_positions(&[0]), Err(Error::Replay(_))));
    }

    #[derive(Debug, Clone)]
    enum Step {
        Question,
        Thinking,
    }

    fn run_schedule(window: usize, ratio: f64, prompt: usize, steps: &[Step]) -> Result<(KVCache, Vec<usize>)> {
        let mut c = KVCache::new(2, 2, CacheConfig::new(window, ratio))?;
        let mut questions = Vec::new();
        let mut pos = 0;
        let row = [0.0, 1.0];
        for _ in 0..prompt.min(window) {
            c.append(&[(&row, &row), (&row, &row)], TokenRole::Question, pos)?;
            questions.push(pos);
            pos += 1;
        }
        for s in steps {
            if c.saturated() {
                let before: Vec<(TokenRole, usize)> = c.roles().iter().copied().zip(c.positions().iter().copied()).collect();
                let seg = c.evict()?;
                let thinking: Vec<usize> =
                    before.iter().filter(|(r, _)| *r == TokenRole::Thinking).map(|(_, p)| *p).collect();
                assert_eq!(&thinking[..seg.len()], seg.positions.as_slice(), "evicted a non-prefix");
            }
            let role = match s {
                Step::Question => TokenRole::Question,
                Step::Thinking => TokenRole::Thinking,
            };
            c.append(&[(&row, &row), (&row, &row)], role, pos)?;
            if role == TokenRole::Question {
                questions.push(pos);
            }
            pos += 1;
            assert!(c.len() <= window);
            assert_eq!(c.keys(0).rows(), c.keys(1).rows());
        }
        Ok((c, questions))
    }

    proptest! {
        #[test]
        fn bounded_and_question_preserving(
            window in 2usize..24,
            ratio in 0.01f64..1.0,
            prompt in 0usize..6,
            steps in prop::collection::vec(prop_oneof![1 => Just(Step::Question), 6 => Just(Step::Thinking)], 0..120),
        ) {
            match run_schedule(window, ratio, prompt, &steps) {
                Ok((c, questions)) => {
                    for q in questions {
                        prop_assert!(c.positions().contains(&q));
                    }
                }
                Err(Error::OnlyQuestionTokens { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn eviction_depends_only_on_metadata(window in 2usize..16, ratio in 0.05f64..1.0, n in 0usize..40) {
            let steps = vec![Step::Thinking; n];
            let (a, _) = run_schedule(window, ratio, 1, &steps).unwrap();
            let (b, _) = run_schedule(window, ratio, 1, &steps).unwrap();
            prop_assert_eq!(a.events(), b.events());
        }

        #[test]
        fn large_window_never_evicts(n in 0usize..30) {
            let steps = vec![Step::Thinking; n];
            let (c, _) = run_schedule(40, 0.25, 3, &steps).unwrap();
            prop_assert!(c.events().is_empty());
            prop_assert_eq!(c.len(), 3 + n);
        }
    }
}
