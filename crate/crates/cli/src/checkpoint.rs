//! Binary checkpoints.
//!
//! Layout: `PTECKPT1` | header length (u64 LE) | JSON header | tensor data as
//! little-endian f64 | SHA-256 of everything before it. The header lists every
//! tensor's name, shape and byte offset into the data section, so it can be
//! inspected without touching the data.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use pte_core::grpo::{trainable_names, TrainState};
use pte_core::model::{ModelConfig, ModelParams};
use pte_core::numerics::{AdamState, Matrix};
use pte_core::pte::{AdapterBank, PteConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PTECKPT1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("inconsistent tensors: {0}")]
    Tensors(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub pte: PteConfig,
    pub iteration: u64,
    pub seed: u64,
    pub adam_step: u64,
    pub train_base: bool,
    /// Effective run configuration that produced the checkpoint, if any.
    pub run_config: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Whether the optimizer moments cover the base model too.
    pub train_base: bool,
    pub run_config: Value,
}

fn tensors(ck: &Checkpoint) -> Result<Vec<(String, &Matrix)>> {
    let s = &ck.state;
    let mut out: Vec<(String, &Matrix)> = Vec::new();
    out.extend(s.params.named().into_iter().map(|(n, m)| (format!("model/{n}"), m)));
    out.extend(s.reference.named().into_iter().map(|(n, m)| (format!("reference/{n}"), m)));
    out.extend(s.bank.named().into_iter().map(|(n, m)| (format!("bank/{n}"), m)));
    let names = trainable_names(&s.params, &s.bank, ck.train_base);
    if names.len() != s.adam.m.len() || names.len() != s.adam.v.len() {
        return Err(CheckpointError::Tensors(format!(
            "{} trainable matrices but {} / {} optimizer moments",
            names.len(),
            s.adam.m.len(),
            s.adam.v.len()
        )));
    }
    out.extend(names.iter().zip(&s.adam.m).map(|(n, m)| (format!("adam.m/{n}"), m)));
    out.extend(names.iter().zip(&s.adam.v).map(|(n, m)| (format!("adam.v/{n}"), m)));
    Ok(out)
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let ts = tensors(ck)?;
    let mut entries = Vec::with_capacity(ts.len());
    let mut data = Vec::new();
    for (name, m) in &ts {
        entries.push(TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols(), offset: data.len() as u64 });
        for x in m.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let s = &ck.state;
    let header = Header {
        format_version: FORMAT_VERSION,
        model: s.params.config.clone(),
        pte: s.bank.config.clone(),
        iteration: s.iteration,
        seed: s.seed,
        adam_step: s.adam.step,
        train_base: ck.train_base,
        run_config: ck.run_config.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes through a temporary file and renames, so readers never see a
/// partially written checkpoint.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_header(json: &[u8]) -> Result<Header> {
    // Check the version before the full schema so old files get a clear error.
    let raw: Value = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let found = raw.get("format_version").and_then(Value::as_u64).ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version { found: found as u32, expected: FORMAT_VERSION });
    }
    serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))
}

fn split_prefix(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    usize::try_from(len).map_err(|_| CheckpointError::Header("header length overflows".into()))
}

/// Reads only the header; the data section and checksum are not touched.
pub fn inspect(path: &Path) -> Result<Header> {
    let mut f = File::open(path)?;
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix).map_err(|_| CheckpointError::Truncated("shorter than the fixed prefix".into()))?;
    let len = split_prefix(&prefix)?;
    let file_len = f.metadata()?.len();
    if 16 + len as u64 > file_len {
        return Err(CheckpointError::Truncated("header extends past end of file".into()));
    }
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)?;
    parse_header(&json)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let len = split_prefix(bytes)?;
    let body_end = bytes
        .len()
        .checked_sub(DIGEST_LEN)
        .filter(|&e| e >= 16 + len)
        .ok_or_else(|| CheckpointError::Truncated("missing data or checksum".into()))?;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::Checksum);
    }
    let header = parse_header(&bytes[16..16 + len])?;
    let data = &bytes[16 + len..body_end];

    let mut by_prefix: std::collections::BTreeMap<&str, Vec<(String, Matrix)>> = Default::default();
    let mut expected_offset = 0u64;
    for t in &header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| CheckpointError::Tensors(format!("{}: shape overflows", t.name)))?;
        if t.offset != expected_offset {
            return Err(CheckpointError::Tensors(format!("{}: offset {} (expected {expected_offset})", t.name, t.offset)));
        }
        let start = t.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(CheckpointError::Truncated(format!("tensor {} runs past the data section", t.name)));
        }
        let values: Vec<f64> =
            data[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Matrix::from_vec(t.rows, t.cols, values).map_err(|e| CheckpointError::Tensors(e.to_string()))?;
        let (prefix, name) = t.name.split_once('/').ok_or_else(|| CheckpointError::Tensors(format!("bad name {}", t.name)))?;
        let slot = match prefix {
            "model" | "reference" | "bank" | "adam.m" | "adam.v" => prefix,
            other => return Err(CheckpointError::Tensors(format!("unknown tensor prefix {other}"))),
        };
        by_prefix.entry(slot).or_default().push((name.to_string(), m));
        expected_offset = end as u64;
    }
    if expected_offset as usize != data.len() {
        return Err(CheckpointError::Tensors("trailing bytes in the data section".into()));
    }
    let mut take = |k: &str| by_prefix.remove(k).unwrap_or_default();
    let err = |e: pte_core::error::Error| CheckpointError::Tensors(e.to_string());
    let params = ModelParams::from_named(header.model.clone(), take("model")).map_err(err)?;
    let reference = ModelParams::from_named(header.model.clone(), take("reference")).map_err(err)?;
    let bank = AdapterBank::from_named(header.pte.clone(), &params, &take("bank")).map_err(err)?;
    let names = trainable_names(&params, &bank, header.train_base);
    let moments = |list: Vec<(String, Matrix)>, which: &str| -> Result<Vec<Matrix>> {
        if list.len() != names.len() || list.iter().zip(&names).any(|((n, _), want)| n != want) {
            return Err(CheckpointError::Tensors(format!("{which} moments do not match the trainable set")));
        }
        Ok(list.into_iter().map(|(_, m)| m).collect())
    };
    let adam = AdamState { m: moments(take("adam.m"), "first")?, v: moments(take("adam.v"), "second")?, step: header.adam_step };
    let state = TrainState { params, bank, reference, adam, iteration: header.iteration, seed: header.seed };
    Ok(Checkpoint { state, train_base: header.train_base, run_config: header.run_config })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use pte_core::grpo::TrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample(train_base: bool) -> Checkpoint {
        let cfg = ModelConfig { n_layers: 1, d_model: 4, n_heads: 1, d_head: 4, d_ff: 6, vocab_size: 5, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        let bank = AdapterBank::init(PteConfig { init_std: 0.1, ..PteConfig::default() }, &params, &mut rng).unwrap();
        let tc = TrainConfig { train_base, ..TrainConfig::default() };
        let mut state = TrainState::new(params, bank, &tc, 11).unwrap();
        state.iteration = 7;
        state.adam.step = 7;
        for m in state.adam.m.iter_mut().chain(state.adam.v.iter_mut()) {
            *m = Matrix::random_normal(m.rows(), m.cols(), 0.1, &mut rng);
        }
        Checkpoint { state, train_base, run_config: serde_json::json!({"seed": 11, "x": [0.1, 1e-300]}) }
    }

    #[test]
    fn round_trip_is_value_and_byte_identical() {
        for tb in [false, true] {
            let ck = sample(tb);
            let bytes = to_bytes(&ck).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_inspection_lists_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample(false);
        save(&ck, &p).unwrap();
        let h = inspect(&p).unwrap();
        assert_eq!(h.iteration, 7);
        let names: Vec<&str> = h.tensors.iter().map(|t| t.name.as_str()).collect();
        for (n, _) in ck.state.bank.named() {
            assert!(names.contains(&format!("bank/{n}").as_str()));
        }
        assert!(names.contains(&"model/embedding"));
        // Truncating the data does not disturb header inspection.
        let bytes = std::fs::read(&p).unwrap();
        let len = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        std::fs::write(&p, &bytes[..len]).unwrap();
        assert_eq!(inspect(&p).unwrap(), h);
        assert!(matches!(load(&p), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn corruption_and_version_are_refused() {
        let bytes = to_bytes(&sample(false)).unwrap();
        for i in [0usize, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(from_bytes(&b).is_err(), "flip at {i} accepted");
        }
        let mut b = bytes.clone();
        b[bytes.len() / 2] ^= 1;
        assert!(matches!(from_bytes(&b), Err(CheckpointError::Checksum)));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 5]), Err(CheckpointError::Checksum | CheckpointError::Truncated(_))));

        // Re-sign a header that claims version 2.
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut h: Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        h["format_version"] = 2.into();
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + len..bytes.len() - DIGEST_LEN]);
        let d = Sha256::digest(&out);
        out.extend_from_slice(&d);
        assert!(matches!(from_bytes(&out), Err(CheckpointError::Version { found: 2, expected: 1 })));
    }
}
