//! Synthetic sequence classification tasks.
//!
//! Token 0 is reserved for padding and never generated. The order-pair and
//! parity tasks use tokens 1 and 2 as designated symbols; every other id is
//! filler.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use blosan_core::init::standard_normal;
use blosan_core::rng::{stream, Rng, Stream};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{CliError, Result};

pub const PAD: usize = 0;
pub const TOKEN_A: usize = 1;
pub const TOKEN_B: usize = 2;
const FIRST_FILLER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Label 1 iff `A` occurs before `B`; both occur exactly once.
    OrderPair,
    /// Label is the class (`id % classes`) of the token following the
    /// single marker `A`.
    CopyClass,
    /// Label is the parity of the number of `A` tokens.
    Parity,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::OrderPair => "order-pair",
            TaskKind::CopyClass => "copy-class",
            TaskKind::Parity => "parity",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order-pair" => Ok(TaskKind::OrderPair),
            "copy-class" => Ok(TaskKind::CopyClass),
            "parity" => Ok(TaskKind::Parity),
            other => Err(CliError::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Mean and standard deviation of sequence lengths.
    pub mu: f64,
    pub sigma: f64,
    /// Number of classes; copy-class only, binary tasks always use 2.
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::OrderPair,
            vocab: 16,
            mu: 24.0,
            sigma: 6.0,
            classes: 2,
            train_size: 8000,
            val_size: 1000,
        }
    }
}

/// Lengths are clamped to `[MIN_LEN, mu + MAX_SIGMAS * sigma]`.
pub const MIN_LEN: usize = 2;
const MAX_SIGMAS: f64 = 4.0;
const MAX_ATTEMPTS: usize = 1000;

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::CopyClass => self.classes,
            TaskKind::OrderPair | TaskKind::Parity => 2,
        }
    }

    pub fn max_len(&self) -> usize {
        ((self.mu + MAX_SIGMAS * self.sigma).round() as usize).max(MIN_LEN)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(CliError::Task(format!("vocabulary needs at least 4 tokens, got {}", self.vocab)));
        }
        if !(self.mu >= MIN_LEN as f64) || !self.mu.is_finite() {
            return Err(CliError::Task(format!("mean length must be at least {MIN_LEN}, got {}", self.mu)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(CliError::Task(format!("length deviation must be non-negative, got {}", self.sigma)));
        }
        if self.kind == TaskKind::CopyClass && !(2..=self.vocab - FIRST_FILLER).contains(&self.classes) {
            return Err(CliError::Task(format!(
                "copy-class needs 2..={} classes, got {}",
                self.vocab - FIRST_FILLER,
                self.classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl Dataset {
    /// Fraction of examples per class over both splits.
    pub fn class_balance(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        for ex in self.train.iter().chain(&self.val) {
            counts[ex.label] += 1;
        }
        let total = (self.train.len() + self.val.len()).max(1) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }

    /// Compact text dump, one `label<TAB>tokens` line per example.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (split, set) in [("train", &self.train), ("val", &self.val)] {
            for ex in set {
                let toks: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
                out.push_str(&format!("{split}\t{}\t{}\n", ex.label, toks.join(" ")));
            }
        }
        out
    }
}

fn draw_len(spec: &TaskSpec, rng: &mut Rng) -> usize {
    let raw = spec.mu + spec.sigma * standard_normal(rng);
    (raw.round().max(0.0) as usize).clamp(MIN_LEN, spec.max_len())
}

fn filler(spec: &TaskSpec, rng: &mut Rng) -> usize {
    rng.gen_range(FIRST_FILLER..spec.vocab)
}

fn order_pair(spec: &TaskSpec, label: usize, rng: &mut Rng) -> Vec<usize> {
    let n = draw_len(spec, rng);
    let mut tokens: Vec<usize> = (0..n).map(|_| filler(spec, rng)).collect();
    let first = rng.gen_range(0..n);
    let mut second = rng.gen_range(0..n - 1);
    if second >= first {
        second += 1;
    }
    let (early, late) = (first.min(second), first.max(second));
    let (at_early, at_late) = if label == 1 { (TOKEN_A, TOKEN_B) } else { (TOKEN_B, TOKEN_A) };
    tokens[early] = at_early;
    tokens[late] = at_late;
    tokens
}

fn copy_class(spec: &TaskSpec, label: usize, rng: &mut Rng) -> Vec<usize> {
    let n = draw_len(spec, rng);
    let mut tokens: Vec<usize> = (0..n).map(|_| filler(spec, rng)).collect();
    let marker = rng.gen_range(0..n - 1);
    tokens[marker] = TOKEN_A;
    let choices: Vec<usize> = (FIRST_FILLER..spec.vocab).filter(|t| t % spec.classes == label).collect();
    tokens[marker + 1] = *choices.choose(rng).expect("every class has a filler");
    tokens
}

fn parity(spec: &TaskSpec, label: usize, rng: &mut Rng) -> Vec<usize> {
    let n = draw_len(spec, rng);
    let mut tokens: Vec<usize> = (0..n).map(|_| filler(spec, rng)).collect();
    let mut count = rng.gen_range(0..=n);
    if count % 2 != label {
        count = if count == 0 { 1 } else { count - 1 };
    }
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(rng);
    for &p in &positions[..count] {
        tokens[p] = TOKEN_A;
    }
    tokens
}

/// Draws a dataset with labels cycling through every class (balanced up to
/// rounding) in shuffled order. Duplicate sequences are redrawn, so the two
/// splits are disjoint.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(seed, Stream::Data);
    let classes = spec.num_classes();
    let total = spec.train_size + spec.val_size;
    let mut labels: Vec<usize> = (0..total).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    for label in labels {
        let tokens = (0..MAX_ATTEMPTS)
            .map(|_| match spec.kind {
                TaskKind::OrderPair => order_pair(spec, label, &mut rng),
                TaskKind::CopyClass => copy_class(spec, label, &mut rng),
                TaskKind::Parity => parity(spec, label, &mut rng),
            })
            .find(|t| seen.insert(t.clone()))
            .ok_or_else(|| CliError::Task(format!("could not draw {total} distinct sequences")))?;
        examples.push(Example { tokens, label });
    }
    let val = examples.split_off(spec.train_size);
    Ok(Dataset { train: examples, val })
}
