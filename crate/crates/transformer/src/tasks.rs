//! Seeded synthetic sequence-classification tasks.
//!
//! Token ids: `0` is padding, `1..=10` are the digits `0..=9`, then the
//! ListOps operators `[MAX`, `[MIN`, `[MED`, `[SM` and the closing bracket.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const OP_MAX: usize = 11;
pub const OP_MIN: usize = 12;
pub const OP_MED: usize = 13;
pub const OP_SUM: usize = 14;
pub const CLOSE: usize = 15;
pub const VOCAB: usize = 16;
pub const NUM_CLASSES: usize = 10;

pub fn digit_token(value: usize) -> usize {
    value + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ListopsMini,
    Denoise1d,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ListopsMini => "listops-mini",
            TaskKind::Denoise1d => "denoise-1d",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "listops-mini" => Ok(TaskKind::ListopsMini),
            "denoise-1d" => Ok(TaskKind::Denoise1d),
            other => Err(Error::Data(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Always `max_len` long; padded with [`PAD`].
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub num_classes: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl TaskDataset {
    /// Validation accuracy of always predicting the most frequent validation label.
    pub fn majority_baseline(&self) -> f64 {
        majority_fraction(&self.val, self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        for ex in self.train.iter().chain(&self.val) {
            if ex.tokens.len() != self.max_len {
                return Err(Error::Data(format!(
                    "sequence of length {} in a dataset with max_len {}",
                    ex.tokens.len(),
                    self.max_len
                )));
            }
            if ex.label >= self.num_classes || ex.tokens.iter().any(|&t| t >= self.vocab) {
                return Err(Error::Data("label or token id out of range".into()));
            }
        }
        Ok(())
    }

    /// Keeps the first `train` and `val` examples of each split.
    pub fn truncated(&self, train: usize, val: usize) -> Self {
        Self {
            train: self.train.iter().take(train).cloned().collect(),
            val: self.val.iter().take(val).cloned().collect(),
            ..self.clone()
        }
    }
}

pub fn majority_fraction(examples: &[Example], num_classes: usize) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; num_classes];
    for ex in examples {
        counts[ex.label] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / examples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ListOpsConfig {
    pub max_len: usize,
    /// Maximum operator nesting; the root counts as depth 1.
    pub max_depth: usize,
    pub min_args: usize,
    pub max_args: usize,
    /// Probability that a non-root argument is a digit rather than a sub-expression.
    pub leaf_prob: f64,
}

impl Default for ListOpsConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            max_depth: 3,
            min_args: 2,
            max_args: 4,
            leaf_prob: 0.3,
        }
    }
}

fn listops_expr(rng: &mut impl Rng, depth: usize, cfg: &ListOpsConfig, out: &mut Vec<usize>) -> usize {
    if depth > 0 && (depth >= cfg.max_depth || rng.random_bool(cfg.leaf_prob)) {
        let v = rng.random_range(0..10);
        out.push(digit_token(v));
        return v;
    }
    let op = [OP_MAX, OP_MIN, OP_MED, OP_SUM][rng.random_range(0..4)];
    let k = rng.random_range(cfg.min_args..=cfg.max_args);
    out.push(op);
    let args: Vec<usize> = (0..k).map(|_| listops_expr(rng, depth + 1, cfg, out)).collect();
    out.push(CLOSE);
    apply_op(op, args)
}

fn apply_op(op: usize, mut args: Vec<usize>) -> usize {
    match op {
        OP_MAX => args.into_iter().max().unwrap_or(0),
        OP_MIN => args.into_iter().min().unwrap_or(0),
        OP_MED => {
            args.sort_unstable();
            args[(args.len() - 1) / 2]
        }
        _ => args.into_iter().sum::<usize>() % 10,
    }
}

/// Evaluates a (possibly padded) ListOps token sequence.
pub fn eval_listops(tokens: &[usize]) -> Result<usize> {
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut result = None;
    for &t in tokens.iter().filter(|&&t| t != PAD) {
        match t {
            1..=10 => match stack.last_mut() {
                Some((_, args)) => args.push(t - 1),
                None if result.is_none() => result = Some(t - 1),
                None => return Err(Error::Data("trailing digit".into())),
            },
            OP_MAX | OP_MIN | OP_MED | OP_SUM => stack.push((t, Vec::new())),
            CLOSE => {
                let (op, args) = stack.pop().ok_or_else(|| Error::Data("unbalanced ']'".into()))?;
                if args.is_empty() {
                    return Err(Error::Data("operator without arguments".into()));
                }
                let v = apply_op(op, args);
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(v),
                    None => result = Some(v),
                }
            }
            other => return Err(Error::Data(format!("unknown token id {other}"))),
        }
    }
    if !stack.is_empty() {
        return Err(Error::Data("unclosed operator".into()));
    }
    result.ok_or_else(|| Error::Data("empty expression".into()))
}

/// Nested MAX/MIN/MED/SUM-mod-10 expressions, 10 classes.
pub fn listops_mini(train: usize, val: usize, seed: u64, cfg: &ListOpsConfig) -> Result<TaskDataset> {
    if cfg.max_depth == 0 || cfg.min_args == 0 || cfg.min_args > cfg.max_args {
        return Err(Error::Data(
            "listops needs depth >= 1 and 1 <= min_args <= max_args".into(),
        ));
    }
    if cfg.max_len < 2 + cfg.min_args {
        return Err(Error::Data(format!(
            "max_len {} cannot hold any expression",
            cfg.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let mut out = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(cfg.max_len);
        while out.len() < n {
            tokens.clear();
            let label = listops_expr(&mut rng, 0, cfg, &mut tokens);
            if tokens.len() > cfg.max_len {
                continue;
            }
            let mut padded = tokens.clone();
            padded.resize(cfg.max_len, PAD);
            out.push(Example { tokens: padded, label });
        }
        out
    };
    let train = draw(train);
    let val = draw(val);
    Ok(TaskDataset {
        kind: TaskKind::ListopsMini,
        train,
        val,
        num_classes: NUM_CLASSES,
        vocab: VOCAB,
        max_len: cfg.max_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub len: usize,
    /// Standard deviation of the additive noise, in digit units.
    pub noise_std: f64,
    /// Probability that a position is replaced by a uniformly random digit.
    pub spike_prob: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            len: 64,
            noise_std: 1.5,
            spike_prob: 0.1,
        }
    }
}

/// Recover a clean level `0..=9` from a noisy digit sequence around it.
pub fn denoise_1d(train: usize, val: usize, seed: u64, cfg: &DenoiseConfig) -> Result<TaskDataset> {
    if cfg.len == 0 || !(cfg.noise_std >= 0.0) {
        return Err(Error::Data("denoise needs len >= 1 and noise_std >= 0".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| {
                let level = rng.random_range(0..10usize);
                let tokens = (0..cfg.len)
                    .map(|_| {
                        let v = if rng.random_bool(cfg.spike_prob) {
                            rng.random_range(0..10) as f64
                        } else {
                            level as f64 + noise.sample(&mut rng)
                        };
                        digit_token(v.round().clamp(0.0, 9.0) as usize)
                    })
                    .collect();
                Example { tokens, label: level }
            })
            .collect::<Vec<_>>()
    };
    let train = draw(train);
    let val = draw(val);
    Ok(TaskDataset {
        kind: TaskKind::Denoise1d,
        train,
        val,
        num_classes: NUM_CLASSES,
        vocab: VOCAB,
        max_len: cfg.len,
    })
}

/// Writes one example per line: `label<TAB>space-separated token ids`.
pub fn write_examples(mut out: impl Write, examples: &[Example]) -> Result<()> {
    for ex in examples {
        let tokens: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
        writeln!(out, "{}\t{}", ex.label, tokens.join(" "))?;
    }
    Ok(())
}

pub fn read_examples(input: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: n + 1, message };
        let (label, tokens) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected label<TAB>tokens".into()))?;
        let label = label.trim().parse().map_err(|e| bad(format!("label: {e}")))?;
        let tokens = tokens
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("token '{t}': {e}"))))
            .collect::<Result<Vec<usize>>>()?;
        out.push(Example { tokens, label });
    }
    Ok(out)
}
