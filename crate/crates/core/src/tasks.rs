//! Synthetic modular-arithmetic chains with exact-match rewards.
//!
//! A depth-`n` prompt reads `S a op₁ b₁ … opₙ bₙ ?`. The reference response
//! works the chain one step at a time, `op b = r ;`, then states the result
//! between an answer marker and a terminator: `A r E`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::rng::substream;

pub const MAX_MODULUS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        match self {
            Op::Add => (a + b) % modulus,
            Op::Sub => (a + modulus - b % modulus) % modulus,
            Op::Mul => (a * b) % modulus,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }
}

/// Fixed symbol table: digits 0–9 take ids 0–9.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { symbols: vec!["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "S", "=", ";", "?", "A", "E"] }
    }
}

impl Vocabulary {
    pub const START: TokenId = 13;
    pub const EQUALS: TokenId = 14;
    pub const STEP: TokenId = 15;
    pub const QUERY: TokenId = 16;
    pub const ANSWER: TokenId = 17;
    pub const END: TokenId = 18;

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| *s == symbol)
    }

    pub fn symbol(&self, id: TokenId) -> Option<&'static str> {
        self.symbols.get(id).copied()
    }

    pub fn digit(d: u32) -> TokenId {
        debug_assert!(d < 10);
        d as TokenId
    }

    pub fn op_token(op: Op) -> TokenId {
        match op {
            Op::Add => 10,
            Op::Sub => 11,
            Op::Mul => 12,
        }
    }

    pub fn op_of(id: TokenId) -> Option<Op> {
        match id {
            10 => Some(Op::Add),
            11 => Some(Op::Sub),
            12 => Some(Op::Mul),
            _ => None,
        }
    }

    /// Space-separated rendering; ids outside the table print as `<id>`.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).map(str::to_string).unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_fits(&self, vocab_size: usize) -> Result<()> {
        if self.len() > vocab_size {
            return Err(Error::Config(format!("task vocabulary needs {} ids, model has {vocab_size}", self.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_tokens: Vec<TokenId>,
    pub gold_answer_tokens: Vec<TokenId>,
    pub depth: usize,
    pub seed: u64,
    pub modulus: u32,
}

impl TaskInstance {
    /// Parses the prompt back into `(start, [(op, operand)])`.
    pub fn chain(&self) -> Option<(u32, Vec<(Op, u32)>)> {
        let p = &self.prompt_tokens;
        if p.len() < 3 || p[0] != Vocabulary::START || *p.last()? != Vocabulary::QUERY || p.len() % 2 == 0 {
            return None;
        }
        let digit = |t: TokenId| if t < 10 { Some(t as u32) } else { None };
        let start = digit(p[1])?;
        let steps = p[2..p.len() - 1]
            .chunks(2)
            .map(|c| Some((Vocabulary::op_of(c[0])?, digit(c[1])?)))
            .collect::<Option<Vec<_>>>()?;
        Some((start, steps))
    }

    /// Step-by-step reference response including answer marker and terminator.
    pub fn gold_response(&self) -> Option<Vec<TokenId>> {
        let (mut acc, steps) = self.chain()?;
        acc %= self.modulus;
        let mut out = Vec::with_capacity(5 * steps.len() + 3);
        for (op, b) in steps {
            acc = op.apply(acc, b, self.modulus);
            out.extend([Vocabulary::op_token(op), Vocabulary::digit(b), Vocabulary::EQUALS, Vocabulary::digit(acc), Vocabulary::STEP]);
        }
        out.extend([Vocabulary::ANSWER, Vocabulary::digit(acc), Vocabulary::END]);
        Some(out)
    }

    /// Length of the shortest response scoring 1 under the chain-of-thought format.
    pub fn min_response_len(depth: usize) -> usize {
        5 * depth + 3
    }
}

pub fn prompt_len(depth: usize) -> usize {
    2 * depth + 3
}

/// Deterministic chain of `depth` operations over `Z_modulus`.
pub fn generate_task(seed: u64, depth: usize, modulus: u32) -> Result<TaskInstance> {
    if depth == 0 {
        return Err(Error::Config("task depth must be at least 1".into()));
    }
    if !(2..=MAX_MODULUS).contains(&modulus) {
        return Err(Error::Config(format!("modulus must lie in 2..={MAX_MODULUS}, got {modulus}")));
    }
    let mut rng = substream(seed, "task", &[depth as u64, modulus as u64]);
    let start = rng.gen_range(0..modulus);
    let mut acc = start;
    let mut prompt = vec![Vocabulary::START, Vocabulary::digit(start)];
    for _ in 0..depth {
        let op = Op::ALL[rng.gen_range(0..Op::ALL.len())];
        let b = rng.gen_range(0..modulus);
        acc = op.apply(acc, b, modulus);
        prompt.extend([Vocabulary::op_token(op), Vocabulary::digit(b)]);
    }
    prompt.push(Vocabulary::QUERY);
    Ok(TaskInstance { prompt_tokens: prompt, gold_answer_tokens: vec![Vocabulary::digit(acc)], depth, seed, modulus })
}

/// 1 iff the span between the last answer marker before the first terminator
/// and that terminator equals the gold answer.
pub fn score(generated: &[TokenId], instance: &TaskInstance) -> f64 {
    let Some(end) = generated.iter().position(|&t| t == Vocabulary::END) else {
        return 0.0;
    };
    let Some(marker) = generated[..end].iter().rposition(|&t| t == Vocabulary::ANSWER) else {
        return 0.0;
    };
    if generated[marker + 1..end] == instance.gold_answer_tokens[..] {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedDataset {
    pub instances: Vec<TaskInstance>,
    pub errors: Vec<LineError>,
}

impl LoadedDataset {
    pub fn summary(&self) -> String {
        format!("{} instances loaded, {} lines rejected", self.instances.len(), self.errors.len())
    }
}

fn parse_tokens(vocab: &Vocabulary, v: &Value, field: &str) -> std::result::Result<Vec<TokenId>, String> {
    let arr = v.as_array().ok_or_else(|| format!("field \"{field}\" must be an array"))?;
    arr.iter()
        .map(|item| match item {
            Value::Number(n) => match n.as_u64() {
                Some(id) if (id as usize) < vocab.len() => Ok(id as TokenId),
                _ => Err(format!("field \"{field}\": token id {n} outside the vocabulary")),
            },
            Value::String(s) => vocab.id(s).ok_or_else(|| format!("field \"{field}\": unknown symbol {s:?}")),
            other => Err(format!("field \"{field}\": unsupported token {other}")),
        })
        .collect()
}

fn parse_line(vocab: &Vocabulary, line: &str, default_modulus: u32) -> std::result::Result<TaskInstance, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let prompt = parse_tokens(vocab, obj.get("prompt").ok_or("missing field \"prompt\"")?, "prompt")?;
    let answer = parse_tokens(vocab, obj.get("answer").ok_or("missing field \"answer\"")?, "answer")?;
    if prompt.is_empty() {
        return Err("empty prompt".into());
    }
    let uint = |k: &str| -> std::result::Result<Option<u64>, String> {
        match obj.get(k) {
            None => Ok(None),
            Some(x) => x.as_u64().map(Some).ok_or_else(|| format!("field \"{k}\" must be a non-negative integer")),
        }
    };
    let modulus = uint("modulus")?.map_or(default_modulus, |m| m as u32);
    if !(2..=MAX_MODULUS).contains(&modulus) {
        return Err(format!("modulus {modulus} outside 2..={MAX_MODULUS}"));
    }
    let depth = match uint("depth")? {
        Some(d) => d as usize,
        None => prompt.len().saturating_sub(3) / 2,
    };
    Ok(TaskInstance { prompt_tokens: prompt, gold_answer_tokens: answer, depth, seed: uint("seed")?.unwrap_or(0), modulus })
}

/// Reads one JSON object per line. Malformed lines are reported and skipped.
pub fn load_dataset(path: &Path, default_modulus: u32) -> Result<LoadedDataset> {
    let vocab = Vocabulary::default();
    let file = std::fs::File::open(path)?;
    let mut out = LoadedDataset::default();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&vocab, &line, default_modulus) {
            Ok(inst) => out.instances.push(inst),
            Err(message) => out.errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(out)
}

/// Writes instances in the format [`load_dataset`] reads, using symbols.
pub fn export_dataset(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let vocab = Vocabulary::default();
    let sym = |ts: &[TokenId]| -> Result<Vec<&str>> {
        ts.iter()
            .map(|&t| vocab.symbol(t).ok_or_else(|| Error::Contract(format!("token {t} outside the task vocabulary"))))
            .collect()
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let obj = serde_json::json!({
            "prompt": sym(&inst.prompt_tokens)?,
            "answer": sym(&inst.gold_answer_tokens)?,
            "depth": inst.depth,
            "seed": inst.seed,
            "modulus": inst.modulus,
        });
        writeln!(w, "{obj}")?;
    }
    w.flush()?;
    Ok(())
}
