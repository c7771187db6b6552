//! Progressive thought encoding: evicted cache segments are folded into a
//! small running context state per adapted projection, and that state is
//! materialised as a low-rank weight delta `A · S · B`.
//!
//! The arithmetic is generic over [`TensorOps`] so the same code drives the
//! eager decoder and the differentiable replay used for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::EvictedSegment;
use crate::error::{Error, Result};
use crate::model::{AdapterOverlay, BoundModel, ModelParams, Projection};
use crate::numerics::{DiffGraph, Eager, Matrix, TensorOps, Var};

/// How a new segment summary is merged into the running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// `S ← rownorm(S + S')`, each row scaled to unit RMS, zero rows kept.
    RowRms,
    /// `S ← ((c + 1)·S + S') / (c + 2)` after `c` earlier segments: a running
    /// mean over the initial state and every segment summary.
    SegmentAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PteConfig {
    /// Number of global tokens `g`.
    pub global_tokens: usize,
    /// Latent width `d_c` of the context state.
    pub latent_dim: usize,
    pub normalize: NormalizeMode,
    pub targets: Vec<Projection>,
    /// One set of global tokens for all layers, or one per layer.
    pub shared_global_tokens: bool,
    /// Start every context state at zero instead of from the global tokens;
    /// the global queries still read evicted segments.
    #[serde(default)]
    pub zero_init_state: bool,
    pub init_std: f64,
}

impl Default for PteConfig {
    fn default() -> Self {
        Self {
            global_tokens: 4,
            latent_dim: 4,
            normalize: NormalizeMode::RowRms,
            targets: vec![Projection::Q, Projection::V],
            shared_global_tokens: true,
            zero_init_state: false,
            init_std: 0.02,
        }
    }
}

impl PteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_tokens == 0 {
            return Err(Error::Config("pte.global_tokens must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("pte.latent_dim must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("pte.targets must name at least one projection".into()));
        }
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        if t.len() != self.targets.len() {
            return Err(Error::Config("pte.targets contains duplicates".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("pte.init_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Trainable parameters of one adapted (layer, projection).
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAdapter {
    pub layer: usize,
    pub target: Projection,
    /// `d_model × d_c` latent maps for queries, keys and values.
    pub wa_q: Matrix,
    pub wa_k: Matrix,
    pub wa_v: Matrix,
    /// `d_model × g`
    pub a: Matrix,
    /// `d_c × d_model`
    pub b: Matrix,
}

/// Parameter groups reported by gradient checks.
pub const PARAM_GROUPS: [&str; 6] = ["a", "b", "wa_q", "wa_k", "wa_v", "h_g"];

/// Global tokens plus one [`TargetAdapter`] per (layer, target).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    pub config: PteConfig,
    /// One `g × d_model` matrix, or one per layer.
    pub global_tokens: Vec<Matrix>,
    pub adapters: Vec<TargetAdapter>,
}

impl AdapterBank {
    /// `A = 0`; everything else scaled normal with `init_std`.
    pub fn init<R: Rng + ?Sized>(config: PteConfig, params: &ModelParams, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = params.config.d_model;
        let n_layers = params.config.n_layers;
        let (g, dc, std) = (config.global_tokens, config.latent_dim, config.init_std);
        let count = if config.shared_global_tokens { 1 } else { n_layers };
        let global_tokens = (0..count).map(|_| Matrix::random_normal(g, d, std, rng)).collect();
        let mut adapters = Vec::new();
        for layer in 0..n_layers {
            for &target in &config.targets {
                adapters.push(TargetAdapter {
                    layer,
                    target,
                    wa_q: Matrix::random_normal(d, dc, std, rng),
                    wa_k: Matrix::random_normal(d, dc, std, rng),
                    wa_v: Matrix::random_normal(d, dc, std, rng),
                    a: Matrix::zeros(d, g),
                    b: Matrix::random_normal(dc, d, std, rng),
                });
            }
        }
        Ok(Self { config, global_tokens, adapters })
    }

    pub fn global_tokens_for(&self, layer: usize) -> Option<&Matrix> {
        if self.config.shared_global_tokens {
            self.global_tokens.first()
        } else {
            self.global_tokens.get(layer)
        }
    }

    /// Canonical `(name, matrix)` list; names are `h_g[.layer]` and
    /// `adapter.{layer}.{target}.{group}`.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, h) in self.global_tokens.iter().enumerate() {
            out.push((global_name(&self.config, i), h));
        }
        for ad in &self.adapters {
            for (group, m) in [("a", &ad.a), ("b", &ad.b), ("wa_q", &ad.wa_q), ("wa_k", &ad.wa_k), ("wa_v", &ad.wa_v)] {
                out.push((adapter_name(ad.layer, ad.target, group), m));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        let config = self.config.clone();
        for (i, h) in self.global_tokens.iter_mut().enumerate() {
            out.push((global_name(&config, i), h));
        }
        for ad in &mut self.adapters {
            let (layer, target) = (ad.layer, ad.target);
            let TargetAdapter { wa_q, wa_k, wa_v, a, b, .. } = ad;
            for (group, m) in [("a", a), ("b", b), ("wa_q", wa_q), ("wa_k", wa_k), ("wa_v", wa_v)] {
                out.push((adapter_name(layer, target, group), m));
            }
        }
        out
    }

    /// Rebuilds a bank from named matrices; the layout follows `config` and `params`.
    pub fn from_named(config: PteConfig, params: &ModelParams, named: &[(String, Matrix)]) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut bank = Self::init(config, params, &mut rng)?;
        let mut seen = 0;
        for (name, slot) in bank.named_mut() {
            let (_, m) = named
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("missing adapter matrix {name}")))?;
            if m.shape() != slot.shape() {
                return Err(Error::Shape(format!("{name}: expected {:?}, found {:?}", slot.shape(), m.shape())));
            }
            *slot = m.clone();
            seen += 1;
        }
        if seen != named.len() {
            return Err(Error::Config(format!("{} unexpected adapter matrices", named.len() - seen)));
        }
        bank.validate_for(params)?;
        Ok(bank)
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Group (`a`, `b`, `wa_q`, `wa_k`, `wa_v`, `h_g`) of a parameter name.
    pub fn group_of(name: &str) -> &str {
        if name.starts_with("h_g") {
            "h_g"
        } else {
            name.rsplit('.').next().unwrap_or(name)
        }
    }

    pub fn validate_for(&self, params: &ModelParams) -> Result<()> {
        self.config.validate()?;
        let d = params.config.d_model;
        let (g, dc) = (self.config.global_tokens, self.config.latent_dim);
        let expected_h = if self.config.shared_global_tokens { 1 } else { params.config.n_layers };
        if self.global_tokens.len() != expected_h {
            return Err(Error::Shape(format!("expected {expected_h} global-token matrices, found {}", self.global_tokens.len())));
        }
        for h in &self.global_tokens {
            if h.shape() != (g, d) {
                return Err(Error::Shape(format!("global tokens: expected {:?}, found {:?}", (g, d), h.shape())));
            }
        }
        for ad in &self.adapters {
            if ad.layer >= params.config.n_layers {
                return Err(Error::Shape(format!("adapter for layer {} of {}", ad.layer, params.config.n_layers)));
            }
            let checks = [
                (&ad.wa_q, (d, dc)),
                (&ad.wa_k, (d, dc)),
                (&ad.wa_v, (d, dc)),
                (&ad.a, (d, g)),
                (&ad.b, (dc, d)),
            ];
            for (m, shape) in checks {
                if m.shape() != shape {
                    return Err(Error::Shape(format!(
                        "adapter {}.{}: expected {shape:?}, found {:?}",
                        ad.layer,
                        ad.target.name(),
                        m.shape()
                    )));
                }
            }
        }
        for (name, m) in self.named() {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("adapter matrix {name}")));
            }
        }
        Ok(())
    }

    pub fn bind<O: TensorOps>(&self, ops: &mut O) -> BoundBank<O::T> {
        self.bind_with(|_, m| ops.constant(m.clone()))
    }

    /// Binds every matrix as a named trainable leaf; names follow [`AdapterBank::named`].
    pub fn bind_trainable(&self, graph: &mut DiffGraph) -> BoundBank<Var> {
        self.bind_with(|name, m| graph.param(name, m.clone()))
    }

    fn bind_with<T>(&self, mut f: impl FnMut(String, &Matrix) -> T) -> BoundBank<T> {
        let global_tokens =
            self.global_tokens.iter().enumerate().map(|(i, h)| f(global_name(&self.config, i), h)).collect();
        let adapters = self
            .adapters
            .iter()
            .map(|ad| BoundAdapter {
                layer: ad.layer,
                target: ad.target,
                a: f(adapter_name(ad.layer, ad.target, "a"), &ad.a),
                b: f(adapter_name(ad.layer, ad.target, "b"), &ad.b),
                wa_q: f(adapter_name(ad.layer, ad.target, "wa_q"), &ad.wa_q),
                wa_k: f(adapter_name(ad.layer, ad.target, "wa_k"), &ad.wa_k),
                wa_v: f(adapter_name(ad.layer, ad.target, "wa_v"), &ad.wa_v),
            })
            .collect();
        BoundBank { config: self.config.clone(), global_tokens, adapters }
    }
}

fn global_name(config: &PteConfig, i: usize) -> String {
    if config.shared_global_tokens {
        "h_g".into()
    } else {
        format!("h_g.{i}")
    }
}

fn adapter_name(layer: usize, target: Projection, group: &str) -> String {
    format!("adapter.{layer}.{}.{group}", target.name())
}

#[derive(Clone, Debug)]
pub struct BoundAdapter<T> {
    pub layer: usize,
    pub target: Projection,
    pub wa_q: T,
    pub wa_k: T,
    pub wa_v: T,
    pub a: T,
    pub b: T,
}

#[derive(Clone, Debug)]
pub struct BoundBank<T> {
    pub config: PteConfig,
    pub global_tokens: Vec<T>,
    pub adapters: Vec<BoundAdapter<T>>,
}

/// Running `g × d_c` summary of everything evicted so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub value: Matrix,
    pub segment_count: usize,
}

// ---- generic arithmetic ----------------------------------------------------

/// `(h·W_Qᵀ, h·W_Kᵀ, h·W_Vᵀ)` with the layer's base projections.
pub fn derive_global_qkv_with<O: TensorOps>(
    ops: &mut O,
    h_g: &O::T,
    wq: &O::T,
    wk: &O::T,
    wv: &O::T,
) -> Result<(O::T, O::T, O::T)> {
    Ok((ops.matmul_t(h_g, wq)?, ops.matmul_t(h_g, wk)?, ops.matmul_t(h_g, wv)?))
}

/// `((q·Wa_Q)(k·Wa_K)ᵀ)(v·Wa_V)`; used for both the initial state (global
/// tokens as keys and values) and segment summaries (evicted entries).
pub fn triple_product<O: TensorOps>(
    ops: &mut O,
    adapter: &BoundAdapter<O::T>,
    q: &O::T,
    k: &O::T,
    v: &O::T,
) -> Result<O::T> {
    let ql = ops.matmul(q, &adapter.wa_q)?;
    let kl = ops.matmul(k, &adapter.wa_k)?;
    let vl = ops.matmul(v, &adapter.wa_v)?;
    let scores = ops.matmul_t(&ql, &kl)?;
    ops.matmul(&scores, &vl)
}

/// Summary of `m` evicted rows; `m = 0` gives the zero state.
pub fn encode_evicted_with<O: TensorOps>(
    ops: &mut O,
    adapter: &BoundAdapter<O::T>,
    keys: &O::T,
    values: &O::T,
    q_g: &O::T,
) -> Result<O::T> {
    let (m, _) = ops.shape(keys);
    if m == 0 {
        let (g, _) = ops.shape(q_g);
        let (_, dc) = ops.shape(&adapter.wa_v);
        return Ok(ops.constant(Matrix::zeros(g, dc)));
    }
    triple_product(ops, adapter, q_g, keys, values)
}

pub fn accumulate_with<O: TensorOps>(
    ops: &mut O,
    mode: NormalizeMode,
    state: &O::T,
    segment: &O::T,
    segment_count: usize,
) -> Result<O::T> {
    match mode {
        NormalizeMode::RowRms => {
            let sum = ops.add(state, segment)?;
            Ok(ops.normalize_rows(&sum))
        }
        NormalizeMode::SegmentAverage => {
            let c = segment_count as f64;
            let prior = ops.scale(state, c + 1.0);
            let sum = ops.add(&prior, segment)?;
            Ok(ops.scale(&sum, 1.0 / (c + 2.0)))
        }
    }
}

/// `A · S · B`
pub fn delta_weights_with<O: TensorOps>(ops: &mut O, adapter: &BoundAdapter<O::T>, state: &O::T) -> Result<O::T> {
    let as_ = ops.matmul(&adapter.a, state)?;
    ops.matmul(&as_, &adapter.b)
}

/// Per-trajectory PTE state over any evaluator: fixed global queries, one
/// context state per adapter, and the overlay those states induce.
#[derive(Clone, Debug)]
pub struct PteRuntime<T> {
    bank: BoundBank<T>,
    n_layers: usize,
    /// Per-layer `q_g`, fixed for the whole decode.
    q_g: Vec<T>,
    states: Vec<T>,
    segment_counts: Vec<usize>,
}

impl<T: Clone> PteRuntime<T> {
    /// Derives the global queries and initial states for a fresh trajectory.
    pub fn start<O: TensorOps<T = T>>(ops: &mut O, bank: BoundBank<T>, model: &BoundModel<T>) -> Result<Self> {
        let n_layers = model.layers.len();
        let cfg = bank.config.clone();
        let mut q_g = Vec::with_capacity(n_layers);
        let mut kv_g = Vec::with_capacity(n_layers);
        for (l, layer) in model.layers.iter().enumerate() {
            let h = if cfg.shared_global_tokens { bank.global_tokens.first() } else { bank.global_tokens.get(l) };
            let h = h.ok_or_else(|| Error::Shape(format!("no global tokens bound for layer {l}")))?;
            let (q, k, v) = derive_global_qkv_with(ops, h, &layer.wq, &layer.wk, &layer.wv)?;
            q_g.push(q);
            kv_g.push((k, v));
        }
        let mut states = Vec::with_capacity(bank.adapters.len());
        for ad in &bank.adapters {
            let s = if cfg.zero_init_state {
                ops.constant(Matrix::zeros(cfg.global_tokens, cfg.latent_dim))
            } else {
                let (k, v) = &kv_g[ad.layer];
                triple_product(ops, ad, &q_g[ad.layer], k, v)?
            };
            states.push(s);
        }
        let segment_counts = vec![0; bank.adapters.len()];
        Ok(Self { bank, n_layers, q_g, states, segment_counts })
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn segment_counts(&self) -> &[usize] {
        &self.segment_counts
    }

    /// Overlay holding `A·S·B` for every adapted projection.
    pub fn overlay<O: TensorOps<T = T>>(&self, ops: &mut O) -> Result<AdapterOverlay<T>> {
        let mut overlay = AdapterOverlay::empty(self.n_layers);
        for (ad, s) in self.bank.adapters.iter().zip(&self.states) {
            let dw = delta_weights_with(ops, ad, s)?;
            overlay.set(ad.layer, ad.target, dw);
        }
        Ok(overlay)
    }

    /// Folds one evicted segment (per-layer keys and values, treated as
    /// constants) into every adapter's state.
    pub fn absorb<O: TensorOps<T = T>>(&mut self, ops: &mut O, keys: &[T], values: &[T]) -> Result<()> {
        if keys.len() != self.n_layers || values.len() != self.n_layers {
            return Err(Error::Shape(format!("segment covers {} layers, model has {}", keys.len(), self.n_layers)));
        }
        let keys: Vec<T> = keys.iter().map(|k| ops.detach(k)).collect();
        let values: Vec<T> = values.iter().map(|v| ops.detach(v)).collect();
        let mode = self.bank.config.normalize;
        for (i, ad) in self.bank.adapters.iter().enumerate() {
            let seg = encode_evicted_with(ops, ad, &keys[ad.layer], &values[ad.layer], &self.q_g[ad.layer])?;
            self.states[i] = accumulate_with(ops, mode, &self.states[i], &seg, self.segment_counts[i])?;
            self.segment_counts[i] += 1;
        }
        Ok(())
    }
}

// ---- eager entry points ----------------------------------------------------

/// Global-token queries, keys and values of `layer` under the base weights.
pub fn derive_global_qkv(h_g: &Matrix, params: &ModelParams, layer: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let lp = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} of {}", params.layers.len())))?;
    if h_g.cols() != params.config.d_model {
        return Err(Error::Shape(format!("global tokens have {} columns, d_model {}", h_g.cols(), params.config.d_model)));
    }
    derive_global_qkv_with(&mut Eager, h_g, &lp.wq, &lp.wk, &lp.wv)
}

fn eager_adapter(ad: &TargetAdapter) -> BoundAdapter<Matrix> {
    BoundAdapter {
        layer: ad.layer,
        target: ad.target,
        wa_q: ad.wa_q.clone(),
        wa_k: ad.wa_k.clone(),
        wa_v: ad.wa_v.clone(),
        a: ad.a.clone(),
        b: ad.b.clone(),
    }
}

pub fn init_context_state(adapter: &TargetAdapter, q_g: &Matrix, k_g: &Matrix, v_g: &Matrix) -> Result<ContextState> {
    let value = triple_product(&mut Eager, &eager_adapter(adapter), q_g, k_g, v_g)?;
    Ok(ContextState { value, segment_count: 0 })
}

/// Summary `S'` of the segment's rows for the adapter's layer.
pub fn encode_evicted(adapter: &TargetAdapter, segment: &EvictedSegment, q_g: &Matrix) -> Result<Matrix> {
    let keys = segment
        .keys
        .get(adapter.layer)
        .ok_or_else(|| Error::Shape(format!("segment has no layer {}", adapter.layer)))?;
    let values = &segment.values[adapter.layer];
    if keys.rows() == 0 {
        return Ok(Matrix::zeros(q_g.rows(), adapter.wa_v.cols()));
    }
    encode_evicted_with(&mut Eager, &eager_adapter(adapter), keys, values, q_g)
}

pub fn accumulate(state: &mut ContextState, segment: &Matrix, mode: NormalizeMode) -> Result<()> {
    if state.value.shape() != segment.shape() {
        return Err(Error::Shape(format!("state {:?} vs segment {:?}", state.value.shape(), segment.shape())));
    }
    if !state.value.is_finite() || !segment.is_finite() {
        return Err(Error::NonFinite("context-state accumulation".into()));
    }
    state.value = accumulate_with(&mut Eager, mode, &state.value, segment, state.segment_count)?;
    state.segment_count += 1;
    Ok(())
}

pub fn delta_weights(adapter: &TargetAdapter, state: &ContextState) -> Result<Matrix> {
    adapter.a.matmul(&state.value)?.matmul(&adapter.b)
}

/// Eager per-trajectory PTE state, cloned from the shared bank at rollout start.
pub struct PteSession {
    runtime: PteRuntime<Matrix>,
    overlay: AdapterOverlay,
}

impl PteSession {
    pub fn start(bank: &AdapterBank, params: &ModelParams) -> Result<Self> {
        bank.validate_for(params)?;
        let mut ops = Eager;
        let model = params.bind(&mut ops);
        let bound = bank.bind(&mut ops);
        let runtime = PteRuntime::start(&mut ops, bound, &model)?;
        let overlay = runtime.overlay(&mut ops)?;
        Ok(Self { runtime, overlay })
    }

    pub fn overlay(&self) -> &AdapterOverlay {
        &self.overlay
    }

    pub fn states(&self) -> Vec<ContextState> {
        self.runtime
            .states()
            .iter()
            .zip(self.runtime.segment_counts())
            .map(|(v, &c)| ContextState { value: v.clone(), segment_count: c })
            .collect()
    }

    /// Encodes, accumulates and re-materialises every adapter; returns the new overlay.
    pub fn on_eviction(&mut self, segment: &EvictedSegment) -> Result<&AdapterOverlay> {
        let mut ops = Eager;
        self.runtime.absorb(&mut ops, &segment.keys, &segment.values)?;
        self.overlay = self.runtime.overlay(&mut ops)?;
        if let Some((l, p, _)) = self.overlay.iter().find(|(_, _, m)| !m.is_finite()) {
            return Err(Error::NonFinite(format!("weight delta for layer {l} {}", p.name())));
        }
        Ok(&self.overlay)
    }
}
