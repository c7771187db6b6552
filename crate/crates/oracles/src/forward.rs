//! Whole-sequence causal forward pass with no cache.

use pte_core::model::{ModelConfig, ModelParams, PositionalScheme};
use pte_core::numerics::Matrix;

pub type Rows = Vec<Vec<f64>>;

/// A matrix copied entry by entry into nested rows.
pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
}

/// `W·x` for `W` stored `out × in`.
pub fn apply(w: &Rows, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for (o, row) in w.iter().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            out[o] += row[i] * xi;
        }
    }
    out
}

pub fn rms(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let scale = 1.0 / (ss / x.len() as f64 + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * scale * g).collect()
}

/// Rotates adjacent pairs inside each head by `pos · base^(-2i/d_head)`.
pub fn rotate(x: &[f64], pos: usize, config: &ModelConfig) -> Vec<f64> {
    if config.positional_scheme == PositionalScheme::None {
        return x.to_vec();
    }
    let mut out = x.to_vec();
    let dh = config.d_head;
    for h in 0..config.n_heads {
        for i in 0..dh / 2 {
            let angle = pos as f64 / config.rope_base.powf(2.0 * i as f64 / dh as f64);
            let (a, b) = (x[h * dh + 2 * i], x[h * dh + 2 * i + 1]);
            out[h * dh + 2 * i] = a * angle.cos() - b * angle.sin();
            out[h * dh + 2 * i + 1] = a * angle.sin() + b * angle.cos();
        }
    }
    out
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let mut max = f64::NEG_INFINITY;
    for v in &z {
        if *v > max {
            max = *v;
        }
    }
    let mut total = 0.0;
    for v in &z {
        total += (v - max).exp();
    }
    let lse = max + total.ln();
    z.iter().map(|v| v - lse).collect()
}

/// Multi-head attention of one query over explicit key/value lists whose keys
/// are already rotated.
pub fn attend_heads(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], config: &ModelConfig) -> Vec<f64> {
    let dh = config.d_head;
    let mut out = vec![0.0; q.len()];
    for h in 0..config.n_heads {
        let mut scores = Vec::with_capacity(keys.len());
        for k in keys {
            let mut s = 0.0;
            for c in h * dh..(h + 1) * dh {
                s += q[c] * k[c];
            }
            scores.push(s / (dh as f64).sqrt());
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            z += *s;
        }
        for (w, v) in scores.iter().zip(values) {
            for c in h * dh..(h + 1) * dh {
                out[c] += w / z * v[c];
            }
        }
    }
    out
}

/// Model weights as nested rows.
#[derive(Clone, Debug)]
pub struct Dense {
    pub config: ModelConfig,
    pub embedding: Rows,
    /// Per layer: q, k, v, o, up, down.
    pub weights: Vec<[Rows; 6]>,
    pub attn_gain: Vec<Vec<f64>>,
    pub ffn_gain: Vec<Vec<f64>>,
    pub final_gain: Vec<f64>,
    pub head: Rows,
}

impl Dense {
    pub fn new(p: &ModelParams) -> Self {
        Self {
            config: p.config.clone(),
            embedding: rows_of(&p.embedding),
            weights: p
                .layers
                .iter()
                .map(|l| {
                    [rows_of(&l.wq), rows_of(&l.wk), rows_of(&l.wv), rows_of(&l.wo), rows_of(&l.w_up), rows_of(&l.w_down)]
                })
                .collect(),
            attn_gain: p.layers.iter().map(|l| rows_of(&l.attn_gain).remove(0)).collect(),
            ffn_gain: p.layers.iter().map(|l| rows_of(&l.ffn_gain).remove(0)).collect(),
            final_gain: rows_of(&p.final_gain).remove(0),
            head: rows_of(&p.head),
        }
    }

    /// Residual update of the feed-forward block.
    pub fn ffn(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let h = rms(x, &self.ffn_gain[layer], self.config.norm_eps);
        let up = apply(&self.weights[layer][4], &h);
        let act: Vec<f64> = up.iter().map(|u| u / (1.0 + (-u).exp())).collect();
        apply(&self.weights[layer][5], &act)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        apply(&self.head, &rms(x, &self.final_gain, self.config.norm_eps))
    }
}

/// Logits at every position of `tokens` with the full causal context and no
/// weight deltas. Intended for sequences of at most a few dozen tokens.
pub fn full_matrix_forward(params: &ModelParams, tokens: &[usize]) -> Rows {
    let w = Dense::new(params);
    let c = &w.config;
    let n = tokens.len();
    let mut x: Rows = tokens.iter().map(|&t| w.embedding[t].clone()).collect();
    for l in 0..c.n_layers {
        let h: Rows = x.iter().map(|r| rms(r, &w.attn_gain[l], c.norm_eps)).collect();
        let q: Rows = h.iter().enumerate().map(|(i, r)| rotate(&apply(&w.weights[l][0], r), i, c)).collect();
        let k: Rows = h.iter().enumerate().map(|(i, r)| rotate(&apply(&w.weights[l][1], r), i, c)).collect();
        let v: Rows = h.iter().map(|r| apply(&w.weights[l][2], r)).collect();
        let mut next = x.clone();
        for i in 0..n {
            // With no evictions, slot and absolute positions coincide.
            let a = attend_heads(&q[i], &k[..=i], &v[..=i], c);
            let o = apply(&w.weights[l][3], &a);
            for j in 0..c.d_model {
                next[i][j] += o[j];
            }
        }
        for row in next.iter_mut() {
            let f = w.ffn(l, row);
            for j in 0..c.d_model {
                row[j] += f[j];
            }
        }
        x = next;
    }
    x.iter().map(|r| w.logits(r)).collect()
}
