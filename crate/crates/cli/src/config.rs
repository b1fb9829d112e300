//! Run configuration: flat `key=value` files with `#` comments, overridable
//! by command-line flags of the same names.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use blosan_core::blosa::{BlockLength, EncoderConfig};
use blosan_core::heads::OptimizerKind;

use crate::error::{io_err, CliError, Result};
use crate::task::TaskSpec;

/// Encoder used between the embeddings and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Bi-BloSA context fusion followed by a source2token summary.
    Blosan,
    /// Source2token summary directly over the embeddings.
    S2tOnly,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Blosan => "blosan",
            Arch::S2tOnly => "s2t",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blosan" => Ok(Arch::Blosan),
            "s2t" => Ok(Arch::S2tOnly),
            other => Err(CliError::Config(format!("unknown arch `{other}` (expected blosan or s2t)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Optimizer default when `None`.
    pub lr: Option<f64>,
    pub steps: usize,
    /// Validation interval in steps; one epoch when 0.
    pub eval_every: usize,
    pub gamma: f64,
    pub hidden: usize,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: None,
            steps: 2000,
            eval_every: 0,
            gamma: 0.0,
            hidden: 32,
            arch: Arch::Blosan,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        let mut encoder = EncoderConfig {
            d_e: 16,
            d_h: 16,
            length_stats: Some((task.mu, task.sigma)),
            ..EncoderConfig::default()
        };
        encoder.attn.d_e = encoder.d_h;
        encoder.attn.d_h = encoder.d_h;
        RunConfig {
            seed: 1,
            task,
            encoder,
            train: TrainConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Every recognized key, in the order written by [`RunConfig::to_kv`].
pub const KEYS: &[&str] = &[
    "seed",
    "task",
    "vocab",
    "mu",
    "sigma",
    "classes",
    "train_size",
    "val_size",
    "d_e",
    "d_h",
    "r",
    "batch",
    "keep_prob",
    "mask_mode",
    "c",
    "arch",
    "hidden",
    "optimizer",
    "lr",
    "steps",
    "eval_every",
    "gamma",
    "out",
];

/// Parses `key=value` lines. Blank lines and `#` comments are skipped and
/// dashes in keys read as underscores.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{raw}`", i + 1)))?;
        kv.insert(normalize_key(k.trim()), v.trim().to_string());
    }
    Ok(kv)
}

pub fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| CliError::Config(format!("bad value `{raw}` for `{key}`")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_kv(&text)?)?;
        Ok(cfg)
    }

    /// Overrides fields from `kv`. Unknown keys are errors.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, raw) in kv {
            self.set(key, raw)?;
        }
        self.encoder.length_stats = Some((self.task.mu, self.task.sigma));
        self.encoder.attn.d_e = self.encoder.d_h;
        self.encoder.attn.d_h = self.encoder.d_h;
        self.validate()
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = normalize_key(key);
        let k = key.as_str();
        match k {
            "seed" => self.seed = parse(k, raw)?,
            "task" => self.task.kind = raw.parse()?,
            "vocab" => self.task.vocab = parse(k, raw)?,
            "mu" => self.task.mu = parse(k, raw)?,
            "sigma" => self.task.sigma = parse(k, raw)?,
            "classes" => self.task.classes = parse(k, raw)?,
            "train_size" => self.task.train_size = parse(k, raw)?,
            "val_size" => self.task.val_size = parse(k, raw)?,
            "d_e" => self.encoder.d_e = parse(k, raw)?,
            "d_h" => self.encoder.d_h = parse(k, raw)?,
            "r" => self.encoder.block_len = raw.parse::<BlockLength>()?,
            "batch" => self.encoder.batch_size = parse(k, raw)?,
            "keep_prob" => self.encoder.keep_prob = parse(k, raw)?,
            "mask_mode" => {
                self.encoder.directional = match raw {
                    "directional" => true,
                    "none" => false,
                    other => return Err(CliError::Config(format!("mask_mode must be directional or none, got `{other}`"))),
                }
            }
            "c" => self.encoder.attn.c = parse(k, raw)?,
            "arch" => self.train.arch = raw.parse()?,
            "hidden" => self.train.hidden = parse(k, raw)?,
            "optimizer" => self.train.optimizer = raw.parse::<OptimizerKind>()?,
            "lr" => self.train.lr = if raw == "default" { None } else { Some(parse(k, raw)?) },
            "steps" => self.train.steps = parse(k, raw)?,
            "eval_every" => self.train.eval_every = parse(k, raw)?,
            "gamma" => self.train.gamma = parse(k, raw)?,
            "out" => self.out = PathBuf::from(raw),
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.encoder.validate()?;
        if self.train.hidden == 0 {
            return Err(CliError::Config("hidden width must be at least 1".into()));
        }
        if !(self.train.gamma >= 0.0) {
            return Err(CliError::Config(format!("gamma must be non-negative, got {}", self.train.gamma)));
        }
        if self.task.train_size == 0 && self.train.steps > 0 {
            return Err(CliError::Config("training needs at least one training example".into()));
        }
        Ok(())
    }

    pub fn mask_mode(&self) -> &'static str {
        if self.encoder.directional {
            "directional"
        } else {
            "none"
        }
    }

    /// Steps between validation passes.
    pub fn eval_interval(&self) -> usize {
        if self.train.eval_every > 0 {
            self.train.eval_every
        } else {
            self.task.train_size.div_ceil(self.encoder.batch_size).max(1)
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let vals = [
            self.seed.to_string(),
            self.task.kind.to_string(),
            self.task.vocab.to_string(),
            self.task.mu.to_string(),
            self.task.sigma.to_string(),
            self.task.classes.to_string(),
            self.task.train_size.to_string(),
            self.task.val_size.to_string(),
            self.encoder.d_e.to_string(),
            self.encoder.d_h.to_string(),
            self.encoder.block_len.to_string(),
            self.encoder.batch_size.to_string(),
            self.encoder.keep_prob.to_string(),
            self.mask_mode().to_string(),
            self.encoder.attn.c.to_string(),
            self.train.arch.to_string(),
            self.train.hidden.to_string(),
            self.train.optimizer.name().to_string(),
            self.train.lr.map_or("default".to_string(), |lr| lr.to_string()),
            self.train.steps.to_string(),
            self.train.eval_every.to_string(),
            self.train.gamma.to_string(),
            self.out.display().to_string(),
        ];
        KEYS.iter().zip(vals).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// `key=value` text that [`RunConfig::from_file`] reads back.
    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
