//! Context-state arithmetic written out element by element.

use pte_core::model::Projection;
use pte_core::pte::{AdapterBank, NormalizeMode};

use crate::forward::{rows_of, Dense, Rows};

/// `S[i][c] = Σ_j Σ_a (q_i·Wq[:,a]) (k_j·Wk[:,a]) (v_j·Wv[:,c])`.
pub fn triple_product_oracle(q: &Rows, wa_q: &Rows, k: &Rows, wa_k: &Rows, v: &Rows, wa_v: &Rows) -> Rows {
    let dc = wa_q.first().map_or(0, |r| r.len());
    let dv = wa_v.first().map_or(0, |r| r.len());
    let latent = |x: &[f64], w: &Rows, a: usize| -> f64 {
        let mut s = 0.0;
        for (xi, wr) in x.iter().zip(w) {
            s += xi * wr[a];
        }
        s
    };
    let mut out = vec![vec![0.0; dv]; q.len()];
    for i in 0..q.len() {
        for c in 0..dv {
            let mut s = 0.0;
            for j in 0..k.len() {
                let mut score = 0.0;
                for a in 0..dc {
                    score += latent(&q[i], wa_q, a) * latent(&k[j], wa_k, a);
                }
                s += score * latent(&v[j], wa_v, c);
            }
            out[i][c] = s;
        }
    }
    out
}

/// Each nonzero row scaled to unit root-mean-square.
pub fn normalize_rows_oracle(s: &Rows) -> Rows {
    s.iter()
        .map(|row| {
            let mut ss = 0.0;
            for v in row {
                ss += v * v;
            }
            if ss == 0.0 {
                row.clone()
            } else {
                let r = (ss / row.len() as f64).sqrt();
                row.iter().map(|v| v / r).collect()
            }
        })
        .collect()
}

/// `ΔW[o][i] = Σ_g Σ_c A[o][g] S[g][c] B[c][i]`.
pub fn delta_oracle(a: &Rows, s: &Rows, b: &Rows) -> Rows {
    let (rows, cols) = (a.len(), b.first().map_or(0, |r| r.len()));
    let mut out = vec![vec![0.0; cols]; rows];
    for o in 0..rows {
        for i in 0..cols {
            let mut acc = 0.0;
            for g in 0..s.len() {
                for c in 0..s[g].len() {
                    acc += a[o][g] * s[g][c] * b[c][i];
                }
            }
            out[o][i] = acc;
        }
    }
    out
}

#[derive(Clone, Debug)]
struct OracleAdapter {
    layer: usize,
    target: Projection,
    wa: [Rows; 3],
    a: Rows,
    b: Rows,
    state: Rows,
    segments: usize,
}

/// Per-trajectory adapter state, advanced one evicted segment at a time.
#[derive(Clone, Debug)]
pub struct OracleAdapters {
    mode: NormalizeMode,
    /// Per-layer global queries.
    q_g: Vec<Rows>,
    adapters: Vec<OracleAdapter>,
}

impl OracleAdapters {
    pub fn start(bank: &AdapterBank, model: &Dense) -> Self {
        let cfg = &bank.config;
        let mut q_g = Vec::new();
        let mut kv_g = Vec::new();
        for l in 0..model.config.n_layers {
            let h = rows_of(if cfg.shared_global_tokens { &bank.global_tokens[0] } else { &bank.global_tokens[l] });
            let proj = |w: &Rows| -> Rows { h.iter().map(|r| crate::forward::apply(w, r)).collect() };
            q_g.push(proj(&model.weights[l][0]));
            kv_g.push((proj(&model.weights[l][1]), proj(&model.weights[l][2])));
        }
        let adapters = bank
            .adapters
            .iter()
            .map(|ad| {
                let wa = [rows_of(&ad.wa_q), rows_of(&ad.wa_k), rows_of(&ad.wa_v)];
                let state = if cfg.zero_init_state {
                    vec![vec![0.0; cfg.latent_dim]; cfg.global_tokens]
                } else {
                    let (k, v) = &kv_g[ad.layer];
                    triple_product_oracle(&q_g[ad.layer], &wa[0], k, &wa[1], v, &wa[2])
                };
                OracleAdapter { layer: ad.layer, target: ad.target, wa, a: rows_of(&ad.a), b: rows_of(&ad.b), state, segments: 0 }
            })
            .collect();
        Self { mode: cfg.normalize, q_g, adapters }
    }

    /// Folds the evicted keys and values (per layer) into every state.
    pub fn absorb(&mut self, keys: &[Rows], values: &[Rows]) {
        for ad in &mut self.adapters {
            let seg = triple_product_oracle(&self.q_g[ad.layer], &ad.wa[0], &keys[ad.layer], &ad.wa[1], &values[ad.layer], &ad.wa[2]);
            let mut sum = ad.state.clone();
            match self.mode {
                NormalizeMode::RowRms => {
                    for (r, sr) in sum.iter_mut().zip(&seg) {
                        for (x, y) in r.iter_mut().zip(sr) {
                            *x += y;
                        }
                    }
                    sum = normalize_rows_oracle(&sum);
                }
                NormalizeMode::SegmentAverage => {
                    let c = ad.segments as f64;
                    for (r, sr) in sum.iter_mut().zip(&seg) {
                        for (x, y) in r.iter_mut().zip(sr) {
                            *x = ((c + 1.0) * *x + y) / (c + 2.0);
                        }
                    }
                }
            }
            ad.state = sum;
            ad.segments += 1;
        }
    }

    pub fn states(&self) -> Vec<Rows> {
        self.adapters.iter().map(|a| a.state.clone()).collect()
    }

    /// Weight deltas per `(layer, projection index)`.
    pub fn deltas(&self, n_layers: usize) -> Vec<[Option<Rows>; 3]> {
        let mut out: Vec<[Option<Rows>; 3]> = (0..n_layers).map(|_| [None, None, None]).collect();
        for ad in &self.adapters {
            out[ad.layer][ad.target.index()] = Some(delta_oracle(&ad.a, &ad.state, &ad.b));
        }
        out
    }
}
