//! A small pre-norm decoder-only transformer.
//!
//! The forward pass is written once against [`TensorOps`]: eagerly for
//! sampling, recorded on a [`DiffGraph`] when gradients are needed. A call
//! processes a chunk of new tokens that attend causally to the cached entries
//! and to each other, which covers one-token decoding and whole-prompt prefill.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{KVCache, TokenRole};
use crate::error::{Error, Result};
use crate::numerics::{DiffGraph, Eager, Matrix, RopeTable, TensorOps, Var};

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    Rotary,
    None,
}

/// How rotary positions are assigned to cached entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Absolute index in the token stream; eviction does not renumber survivors.
    Absolute,
    /// Index of the entry's current cache slot.
    CacheSlot,
}

/// Attention projections that can receive a weight delta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positional_scheme: PositionalScheme,
    pub position_mode: PositionMode,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_ff: 64,
            vocab_size: 32,
            max_positions: 256,
            positional_scheme: PositionalScheme::Rotary,
            position_mode: PositionMode::Absolute,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "model.d_model ({}) must equal n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.positional_scheme == PositionalScheme::Rotary && self.d_head % 2 != 0 {
            return Err(Error::Config("model.d_head must be even for rotary positions".into()));
        }
        if !(self.norm_eps >= 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::Config("model.norm_eps must be >= 0 and model.rope_base > 1".into()));
        }
        Ok(())
    }

    pub fn rope_table(&self) -> Arc<RopeTable> {
        RopeTable::new(self.n_heads, self.d_head, self.max_positions, self.rope_base)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_gain: Matrix,
    pub ffn_gain: Matrix,
}

impl LayerParams {
    pub fn projection(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }
}

/// All weights of the transformer. Projections are stored `out x in` and
/// applied to row activations as `h · Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Matrix,
    pub head: Matrix,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: Matrix::random_normal(d, d, proj_std, rng),
                wk: Matrix::random_normal(d, d, proj_std, rng),
                wv: Matrix::random_normal(d, d, proj_std, rng),
                wo: Matrix::random_normal(d, d, out_std, rng),
                w_up: Matrix::random_normal(config.d_ff, d, proj_std, rng),
                w_down: Matrix::random_normal(d, config.d_ff, out_std / (config.d_ff as f64 / d as f64).sqrt(), rng),
                attn_gain: Matrix::filled(1, d, 1.0),
                ffn_gain: Matrix::filled(1, d, 1.0),
            })
            .collect();
        Ok(Self {
            embedding: Matrix::random_normal(config.vocab_size, d, 1.0, rng),
            layers,
            final_gain: Matrix::filled(1, d, 1.0),
            head: Matrix::random_normal(config.vocab_size, d, proj_std, rng),
            config,
        })
    }

    /// Expected shape of every named matrix, in canonical order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let d = config.d_model;
        let mut out = vec![("embedding".to_string(), (config.vocab_size, d))];
        for l in 0..config.n_layers {
            for (n, s) in [
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("wo", (d, d)),
                ("w_up", (config.d_ff, d)),
                ("w_down", (d, config.d_ff)),
                ("attn_gain", (1, d)),
                ("ffn_gain", (1, d)),
            ] {
                out.push((format!("layers.{l}.{n}"), s));
            }
        }
        out.push(("final_gain".into(), (1, d)));
        out.push(("head".into(), (config.vocab_size, d)));
        out
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, m) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
                ("w_up", &layer.w_up),
                ("w_down", &layer.w_down),
                ("attn_gain", &layer.attn_gain),
                ("ffn_gain", &layer.ffn_gain),
            ] {
                out.push((format!("layers.{l}.{n}"), m));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerParams { wq, wk, wv, wo, w_up, w_down, attn_gain, ffn_gain } = layer;
            for (n, m) in [
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("w_up", w_up),
                ("w_down", w_down),
                ("attn_gain", attn_gain),
                ("ffn_gain", ffn_gain),
            ] {
                out.push((format!("layers.{l}.{n}"), m));
            }
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Rebuilds parameters from named matrices (any order).
    pub fn from_named(config: ModelConfig, mut named: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let i = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("missing model matrix {name}")))?;
            let (_, m) = named.swap_remove(i);
            if m.shape() != shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", m.shape())));
            }
            Ok(m)
        };
        let d = config.d_model;
        let embedding = take("embedding", (config.vocab_size, d))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerParams {
                wq: take(&format!("layers.{l}.wq"), (d, d))?,
                wk: take(&format!("layers.{l}.wk"), (d, d))?,
                wv: take(&format!("layers.{l}.wv"), (d, d))?,
                wo: take(&format!("layers.{l}.wo"), (d, d))?,
                w_up: take(&format!("layers.{l}.w_up"), (config.d_ff, d))?,
                w_down: take(&format!("layers.{l}.w_down"), (d, config.d_ff))?,
                attn_gain: take(&format!("layers.{l}.attn_gain"), (1, d))?,
                ffn_gain: take(&format!("layers.{l}.ffn_gain"), (1, d))?,
            });
        }
        let final_gain = take("final_gain", (1, d))?;
        let head = take("head", (config.vocab_size, d))?;
        if let Some((n, _)) = named.first() {
            return Err(Error::Config(format!("unexpected model matrix {n}")));
        }
        let params = Self { config, embedding, layers, final_gain, head };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config);
        let named = self.named();
        if expected.len() != named.len() {
            return Err(Error::Shape(format!("expected {} matrices, found {}", expected.len(), named.len())));
        }
        for ((name, shape), (_, m)) in expected.iter().zip(&named) {
            if m.shape() != *shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("model matrix {name}")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Binds every matrix as a constant of `ops`.
    pub fn bind<O: TensorOps>(&self, ops: &mut O) -> BoundModel<O::T> {
        self.bind_with(|_, m| ops.constant(m.clone()))
    }

    /// Binds every matrix as a named trainable leaf of `graph`.
    pub fn bind_trainable(&self, graph: &mut DiffGraph) -> BoundModel<Var> {
        self.bind_with(|name, m| graph.param(name, m.clone()))
    }

    fn bind_with<T>(&self, mut f: impl FnMut(String, &Matrix) -> T) -> BoundModel<T> {
        let embedding = f("embedding".into(), &self.embedding);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, p)| BoundLayer {
                wq: f(format!("layers.{l}.wq"), &p.wq),
                wk: f(format!("layers.{l}.wk"), &p.wk),
                wv: f(format!("layers.{l}.wv"), &p.wv),
                wo: f(format!("layers.{l}.wo"), &p.wo),
                w_up: f(format!("layers.{l}.w_up"), &p.w_up),
                w_down: f(format!("layers.{l}.w_down"), &p.w_down),
                attn_gain: f(format!("layers.{l}.attn_gain"), &p.attn_gain),
                ffn_gain: f(format!("layers.{l}.ffn_gain"), &p.ffn_gain),
            })
            .collect();
        BoundModel {
            embedding,
            layers,
            final_gain: f("final_gain".into(), &self.final_gain),
            head: f("head".into(), &self.head),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub w_up: T,
    pub w_down: T,
    pub attn_gain: T,
    pub ffn_gain: T,
}

impl<T> BoundLayer<T> {
    pub fn projection(&self, p: Projection) -> &T {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }
}

/// Model weights bound to an evaluator.
#[derive(Clone, Debug)]
pub struct BoundModel<T> {
    pub embedding: T,
    pub layers: Vec<BoundLayer<T>>,
    pub final_gain: T,
    pub head: T,
}

/// Optional weight deltas per (layer, projection); absent means zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterOverlay<T = Matrix> {
    deltas: Vec<[Option<T>; 3]>,
}

impl<T> AdapterOverlay<T> {
    pub fn empty(n_layers: usize) -> Self {
        Self { deltas: (0..n_layers).map(|_| [None, None, None]).collect() }
    }

    pub fn n_layers(&self) -> usize {
        self.deltas.len()
    }

    pub fn get(&self, layer: usize, p: Projection) -> Option<&T> {
        self.deltas.get(layer).and_then(|d| d[p.index()].as_ref())
    }

    pub fn set(&mut self, layer: usize, p: Projection, delta: T) {
        self.deltas[layer][p.index()] = Some(delta);
    }

    pub fn clear(&mut self, layer: usize, p: Projection) {
        self.deltas[layer][p.index()] = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Projection, &T)> {
        self.deltas.iter().enumerate().flat_map(|(l, d)| {
            Projection::ALL.into_iter().filter_map(move |p| d[p.index()].as_ref().map(|m| (l, p, m)))
        })
    }
}

impl AdapterOverlay<Matrix> {
    /// Checks that every delta matches its target weight's shape.
    pub fn validate_for(&self, params: &ModelParams) -> Result<()> {
        if self.deltas.len() != params.layers.len() {
            return Err(Error::Shape(format!("overlay has {} layers, model {}", self.deltas.len(), params.layers.len())));
        }
        for (l, p, m) in self.iter() {
            let target = params.layers[l].projection(p);
            if m.shape() != target.shape() {
                return Err(Error::Shape(format!(
                    "overlay delta for layer {l} {}: {:?} vs weight {:?}",
                    p.name(),
                    m.shape(),
                    target.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("overlay delta for layer {l} {}", p.name())));
            }
        }
        Ok(())
    }
}

/// `W + ΔW` for the Q, K and V projections of every layer.
pub fn effective_projections<O: TensorOps>(
    ops: &mut O,
    model: &BoundModel<O::T>,
    overlay: &AdapterOverlay<O::T>,
) -> Result<Vec<[O::T; 3]>> {
    if overlay.n_layers() != model.layers.len() {
        return Err(Error::Shape(format!("overlay has {} layers, model {}", overlay.n_layers(), model.layers.len())));
    }
    model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut eff = |p: Projection| -> Result<O::T> {
                let base = layer.projection(p);
                match overlay.get(l, p) {
                    Some(delta) => ops.add(base, delta),
                    None => Ok(base.clone()),
                }
            };
            Ok([eff(Projection::Q)?, eff(Projection::K)?, eff(Projection::V)?])
        })
        .collect()
}

/// `(q, k, v)` of one hidden state under `W + ΔW`.
pub fn project_qkv(
    h: &[f64],
    layer: usize,
    params: &ModelParams,
    overlay: &AdapterOverlay,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = params.config.d_model;
    if h.len() != d {
        return Err(Error::Shape(format!("project_qkv: hidden state of {} entries, d_model {d}", h.len())));
    }
    let lp = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("project_qkv: layer {layer} of {}", params.layers.len())))?;
    overlay.validate_for(params)?;
    let x = Matrix::row_vector(h);
    let project = |p: Projection| -> Result<Vec<f64>> {
        let w = match overlay.get(layer, p) {
            Some(delta) => lp.projection(p).add(delta)?,
            None => lp.projection(p).clone(),
        };
        Ok(x.matmul_t(&w)?.into_data())
    };
    Ok((project(Projection::Q)?, project(Projection::K)?, project(Projection::V)?))
}

/// Single-head attention of one query over cached keys and values:
/// `softmax(q·Kᵀ / √d_head) · V`.
pub fn attend(q: &[f64], keys: &Matrix, values: &Matrix, d_head: usize) -> Result<Vec<f64>> {
    if keys.rows() == 0 {
        return Err(Error::Contract("attend over an empty cache".into()));
    }
    if keys.rows() != values.rows() || keys.cols() != q.len() || d_head == 0 {
        return Err(Error::Shape(format!(
            "attend: q {} with keys {:?} and values {:?}",
            q.len(),
            keys.shape(),
            values.shape()
        )));
    }
    let scores = Matrix::row_vector(q).matmul_t(keys)?.scale(1.0 / (d_head as f64).sqrt());
    let weights = crate::numerics::kernels::softmax_rows(&scores, None);
    Ok(weights.matmul(values)?.into_data())
}

/// Output of one chunk forward: logits for every new token and the
/// pre-rotary keys and values each layer produced for them.
#[derive(Debug, Clone)]
pub struct ChunkOutput<T> {
    pub logits: T,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

/// Cached entries visible to a chunk, per layer.
pub struct CacheView<'a, T> {
    pub keys: Vec<&'a T>,
    pub values: Vec<&'a T>,
    /// Absolute positions of the cached entries, in slot order.
    pub positions: &'a [usize],
}

/// Runs `tokens` (at absolute `positions`) through the model. Token `i` of the
/// chunk attends to every cached entry and to chunk tokens `0..=i`.
#[allow(clippy::too_many_arguments)]
pub fn forward_chunk<O: TensorOps>(
    ops: &mut O,
    config: &ModelConfig,
    rope: &Arc<RopeTable>,
    model: &BoundModel<O::T>,
    projections: &[[O::T; 3]],
    cache: &CacheView<'_, O::T>,
    tokens: &[TokenId],
    positions: &[usize],
) -> Result<ChunkOutput<O::T>> {
    if tokens.is_empty() || tokens.len() != positions.len() {
        return Err(Error::Contract(format!("forward: {} tokens with {} positions", tokens.len(), positions.len())));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Contract(format!("token {t} outside vocabulary of {}", config.vocab_size)));
    }
    if let Some(&p) = positions.iter().chain(cache.positions).find(|&&p| p >= config.max_positions) {
        return Err(Error::Capacity { position: p, max: config.max_positions });
    }
    let cached = cache.positions.len();
    let n = tokens.len();
    let (q_pos, k_pos): (Vec<usize>, Vec<usize>) = match config.position_mode {
        PositionMode::Absolute => (positions.to_vec(), cache.positions.iter().chain(positions).copied().collect()),
        PositionMode::CacheSlot => ((cached..cached + n).collect(), (0..cached + n).collect()),
    };
    let dh = config.d_head;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut x = ops.gather_rows(&model.embedding, tokens)?;
    let mut new_keys = Vec::with_capacity(model.layers.len());
    let mut new_values = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let [wq, wk, wv] = &projections[l];
        let h = ops.rms_norm(&x, &layer.attn_gain, config.norm_eps)?;
        let q = ops.matmul_t(&h, wq)?;
        let k = ops.matmul_t(&h, wk)?;
        let v = ops.matmul_t(&h, wv)?;
        let k_all = ops.concat_rows(&[cache.keys[l], &k])?;
        let v_all = ops.concat_rows(&[cache.values[l], &v])?;
        let (q_r, k_r) = match config.positional_scheme {
            PositionalScheme::Rotary => (ops.rope(&q, &q_pos, rope)?, ops.rope(&k_all, &k_pos, rope)?),
            PositionalScheme::None => (q, k_all),
        };
        let mut heads = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = ops.slice_cols(&q_r, s, e);
            let kh = ops.slice_cols(&k_r, s, e);
            let vh = ops.slice_cols(&v_all, s, e);
            let scores = ops.matmul_t(&qh, &kh)?;
            let scores = ops.scale(&scores, inv_sqrt);
            let weights = ops.softmax_rows(&scores, Some(cached));
            heads.push(ops.matmul(&weights, &vh)?);
        }
        let head_refs: Vec<&O::T> = heads.iter().collect();
        let attn = ops.concat_cols(&head_refs)?;
        let attn_out = ops.matmul_t(&attn, &layer.wo)?;
        x = ops.add(&x, &attn_out)?;

        let h2 = ops.rms_norm(&x, &layer.ffn_gain, config.norm_eps)?;
        let up = ops.matmul_t(&h2, &layer.w_up)?;
        let act = ops.silu(&up);
        let down = ops.matmul_t(&act, &layer.w_down)?;
        x = ops.add(&x, &down)?;

        new_keys.push(k);
        new_values.push(v);
    }
    let hf = ops.rms_norm(&x, &model.final_gain, config.norm_eps)?;
    let logits = ops.matmul_t(&hf, &model.head)?;
    Ok(ChunkOutput { logits, keys: new_keys, values: new_values })
}

/// Eager decoder with bound weights and precomputed effective projections.
pub struct Decoder {
    config: ModelConfig,
    rope: Arc<RopeTable>,
    model: BoundModel<Matrix>,
    projections: Vec<[Matrix; 3]>,
}

impl Decoder {
    pub fn new(params: &ModelParams, overlay: &AdapterOverlay) -> Result<Self> {
        overlay.validate_for(params)?;
        let mut ops = Eager;
        let model = params.bind(&mut ops);
        let projections = effective_projections(&mut ops, &model, overlay)?;
        Ok(Self { config: params.config.clone(), rope: params.config.rope_table(), model, projections })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_overlay(&mut self, overlay: &AdapterOverlay) -> Result<()> {
        self.projections = effective_projections(&mut Eager, &self.model, overlay)?;
        Ok(())
    }

    /// Runs `tokens` against `cache`, appends them with `role` and returns per-token logits.
    pub fn run(&self, tokens: &[TokenId], cache: &mut KVCache, role: TokenRole) -> Result<Matrix> {
        if cache.n_layers() != self.config.n_layers || cache.width() != self.config.d_model {
            return Err(Error::Shape("cache layout does not match the model".into()));
        }
        if cache.len() + tokens.len() > cache.config().window {
            return Err(Error::Contract(format!(
                "{} tokens do not fit a cache holding {} of {}",
                tokens.len(),
                cache.len(),
                cache.config().window
            )));
        }
        let start = cache.next_position();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let out = {
            let view = CacheView {
                keys: (0..self.config.n_layers).map(|l| cache.keys(l)).collect(),
                values: (0..self.config.n_layers).map(|l| cache.values(l)).collect(),
                positions: cache.positions(),
            };
            forward_chunk(&mut Eager, &self.config, &self.rope, &self.model, &self.projections, &view, tokens, &positions)?
        };
        for (i, &pos) in positions.iter().enumerate() {
            let rows: Vec<(&[f64], &[f64])> = out.keys.iter().zip(&out.values).map(|(k, v)| (k.row(i), v.row(i))).collect();
            cache.append(&rows, role, pos)?;
        }
        Ok(out.logits)
    }

    pub fn step(&self, token: TokenId, cache: &mut KVCache, role: TokenRole) -> Result<Vec<f64>> {
        Ok(self.run(&[token], cache, role)?.into_data())
    }
}

/// Embeds `token`, runs every layer against `cache`, appends the new keys and
/// values tagged `role`, and returns next-token logits.
pub fn decode_step(
    token: TokenId,
    cache: &mut KVCache,
    params: &ModelParams,
    overlay: &AdapterOverlay,
    role: TokenRole,
) -> Result<Vec<f64>> {
    Decoder::new(params, overlay)?.step(token, cache, role)
}

/// Processes a whole prompt in one pass, tagging every entry as a question token.
pub fn prefill(tokens: &[TokenId], cache: &mut KVCache, params: &ModelParams, overlay: &AdapterOverlay) -> Result<Matrix> {
    if tokens.is_empty() {
        return Err(Error::Contract("prefill of an empty sequence".into()));
    }
    Decoder::new(params, overlay)?.run(tokens, cache, TokenRole::Question)
}
