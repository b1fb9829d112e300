//! Encoder configuration, token embedding and the Bi-BloSAN sentence encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::mblosa::BiBlosa;
use super::plan::{select_block_length, select_block_length_batched};
use crate::attention::{AttnConfig, MaskKind, Source2Token, Validity};
use crate::autodiff::NodeId;
use crate::error::{invalid, Error, Result};
use crate::init::{check_keep_prob, uniform};
use crate::params::{ParamKind, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockLength {
    #[default]
    Auto,
    Fixed(usize),
}

impl fmt::Display for BlockLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockLength::Auto => f.write_str("auto"),
            BlockLength::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for BlockLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(BlockLength::Auto);
        }
        match s.parse::<usize>() {
            Ok(r) if r >= 1 => Ok(BlockLength::Fixed(r)),
            _ => Err(invalid(format!("block length must be `auto` or a positive integer, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_e: usize,
    pub d_h: usize,
    pub block_len: BlockLength,
    pub batch_size: usize,
    /// Mean and standard deviation of sequence lengths; with `Auto` block
    /// length, `r` is sized for the expected longest sequence in a batch.
    pub length_stats: Option<(f64, f64)>,
    pub keep_prob: f64,
    /// Forward/backward masks when true, unmasked attention otherwise.
    pub directional: bool,
    pub attn: AttnConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_e: 32,
            d_h: 32,
            block_len: BlockLength::Auto,
            batch_size: 64,
            length_stats: None,
            keep_prob: 1.0,
            directional: true,
            attn: AttnConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_h == 0 {
            return Err(invalid(format!("encoder dims must be positive, got d_e={} d_h={}", self.d_e, self.d_h)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if let Some((mu, sigma)) = self.length_stats {
            select_block_length_batched(mu, sigma, self.batch_size)?;
        }
        check_keep_prob(self.keep_prob)?;
        self.attn.validate()
    }

    /// Block length used for sequences padded to length `n`.
    pub fn block_length(&self, n: usize) -> Result<usize> {
        match (self.block_len, self.length_stats) {
            (BlockLength::Fixed(r), _) => Ok(r),
            (BlockLength::Auto, Some((mu, sigma))) => select_block_length_batched(mu, sigma, self.batch_size),
            (BlockLength::Auto, None) => select_block_length(n),
        }
    }

    pub fn mask_kinds(&self) -> (MaskKind, MaskKind) {
        if self.directional {
            (MaskKind::Forward, MaskKind::Backward)
        } else {
            (MaskKind::None, MaskKind::None)
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("d_e".to_string(), self.d_e.to_string()),
            ("d_h".to_string(), self.d_h.to_string()),
            ("r".to_string(), self.block_len.to_string()),
            ("batch".to_string(), self.batch_size.to_string()),
            ("keep_prob".to_string(), self.keep_prob.to_string()),
            ("directional".to_string(), self.directional.to_string()),
            ("c".to_string(), self.attn.c.to_string()),
        ];
        if let Some((mu, sigma)) = self.length_stats {
            kv.push(("mu".to_string(), mu.to_string()));
            kv.push(("sigma".to_string(), sigma.to_string()));
        }
        kv
    }

    /// Reads the keys written by [`EncoderConfig::to_kv`]; missing keys keep
    /// their defaults and unknown keys are ignored.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn parse<V: FromStr>(kv: &BTreeMap<String, String>, key: &str, into: &mut V) -> Result<()> {
            if let Some(raw) = kv.get(key) {
                *into = raw
                    .parse()
                    .map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))?;
            }
            Ok(())
        }
        let mut cfg = EncoderConfig::default();
        parse(kv, "d_e", &mut cfg.d_e)?;
        parse(kv, "d_h", &mut cfg.d_h)?;
        if let Some(raw) = kv.get("r") {
            cfg.block_len = raw.parse()?;
        }
        parse(kv, "batch", &mut cfg.batch_size)?;
        parse(kv, "keep_prob", &mut cfg.keep_prob)?;
        parse(kv, "directional", &mut cfg.directional)?;
        parse(kv, "c", &mut cfg.attn.c)?;
        match (kv.get("mu"), kv.get("sigma")) {
            (None, None) => {}
            (mu, sigma) => {
                let mut stats = (0.0, 0.0);
                if mu.is_some() {
                    parse(kv, "mu", &mut stats.0)?;
                }
                if sigma.is_some() {
                    parse(kv, "sigma", &mut stats.1)?;
                }
                cfg.length_stats = Some(stats);
            }
        }
        cfg.attn.d_e = cfg.d_h;
        cfg.attn.d_h = cfg.d_h;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Lookup table `[vocab, d_e]` under `{prefix}/table`.
#[derive(Debug, Clone)]
pub struct Embedding {
    prefix: String,
    pub vocab: usize,
    pub d_e: usize,
    pub trainable: bool,
}

/// Range of the uniform initializer for embedding rows.
pub const EMBEDDING_INIT: f64 = 0.05;

impl Embedding {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, vocab: usize, d_e: usize, rng: &mut Rng) -> Result<Self> {
        let table = uniform(&[vocab, d_e], -EMBEDDING_INIT, EMBEDDING_INIT, rng)?;
        Self::from_table(store, prefix, table, true)
    }

    /// Wraps an existing table, e.g. pretrained vectors.
    pub fn from_table<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, table: Tensor<T>, trainable: bool) -> Result<Self> {
        if table.rank() != 2 {
            return Err(invalid(format!("embedding table must be [vocab, d_e], got {:?}", table.shape())));
        }
        let (vocab, d_e) = (table.shape()[0], table.shape()[1]);
        store.insert(format!("{prefix}/table"), table, ParamKind::Embedding)?;
        Ok(Embedding {
            prefix: prefix.to_string(),
            vocab,
            d_e,
            trainable,
        })
    }

    /// `ids` laid out as `shape` -> `[shape.., d_e]`.
    pub fn lookup<T: Scalar>(&self, sess: &mut Session<T>, ids: &[usize], shape: &[usize]) -> Result<NodeId> {
        let path = format!("{}/table", self.prefix);
        let table = if self.trainable {
            sess.param(&path)?
        } else {
            let value = sess.params().get(&path)?.clone();
            sess.constant(value)
        };
        sess.graph.embedding(table, ids, shape)
    }
}

/// Bi-BloSA context fusion followed by a source2token summary:
/// `[.., n, d_e]` -> `[.., 2 d_h]`.
#[derive(Debug, Clone)]
pub struct BiBlosan {
    pub cfg: EncoderConfig,
    pub layer: BiBlosa,
    pub summary: Source2Token,
}

impl BiBlosan {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (fw, bw) = cfg.mask_kinds();
        let layer = BiBlosa::init(store, prefix, cfg.d_e, cfg.d_h, cfg.attn.c, cfg.keep_prob, fw, bw, rng)?;
        let summary = Source2Token::init(store, &format!("{prefix}/s2t"), 2 * cfg.d_h, rng)?;
        Ok(BiBlosan {
            cfg: cfg.clone(),
            layer,
            summary,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.cfg.d_h
    }

    /// Context features `u_bi [.., n, 2 d_h]`.
    pub fn context<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId, tokens: Option<&Validity>) -> Result<NodeId> {
        let shape = sess.graph.shape(x);
        let n = shape[shape.len() - 2];
        let r = self.cfg.block_length(n)?;
        self.layer.forward(sess, x, r, tokens)
    }

    /// Sequence encoding `s [.., 2 d_h]`.
    pub fn encode<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId, tokens: Option<&Validity>) -> Result<NodeId> {
        let u = self.context(sess, x, tokens)?;
        let u = sess.dropout(u, self.cfg.keep_prob)?;
        self.summary.forward(sess, u, tokens)
    }
}
