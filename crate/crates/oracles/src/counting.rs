use pte_core::model::ModelConfig;

/// Operations of one decode step's cache-dependent attention, counted one
/// multiply or add at a time.
pub fn attention_flops_by_loops(cache_len: usize, config: &ModelConfig) -> u64 {
    let mut ops = 0u64;
    for _layer in 0..config.n_layers {
        for _head in 0..config.n_heads {
            for _key in 0..cache_len {
                // score: one multiply and one add per head dimension
                for _ in 0..config.d_head {
                    ops += 2;
                }
                // weighted value sum
                for _ in 0..config.d_head {
                    ops += 2;
                }
            }
        }
    }
    ops
}

/// Stored key and value scalars across all layers.
pub fn cache_elements_by_loops(cache_len: usize, config: &ModelConfig) -> u64 {
    let mut n = 0u64;
    for _layer in 0..config.n_layers {
        for _entry in 0..cache_len {
            for _kv in 0..2 {
                n += config.d_model as u64;
            }
        }
    }
    n
}

/// Evaluates a rendered chain prompt `S a (op b)* ?` with its own token
/// decoding: digits are `0..=9`, `+ - *` are `10..=12`.
pub fn chain_answer(prompt: &[usize], modulus: u32) -> Option<u32> {
    if prompt.len() < 3 || prompt[0] != 13 || *prompt.last()? != 16 || prompt.len() % 2 == 0 {
        return None;
    }
    let m = modulus as i64;
    let mut acc = *prompt.get(1).filter(|&&t| t < 10)? as i64;
    let body = &prompt[2..prompt.len() - 1];
    for pair in body.chunks(2) {
        let (op, b) = (pair[0], *pair.get(1)? as i64);
        if b >= 10 {
            return None;
        }
        acc = match op {
            10 => acc + b,
            11 => acc - b,
            12 => acc * b,
            _ => return None,
        }
        .rem_euclid(m);
    }
    Some(acc as u32)
}
