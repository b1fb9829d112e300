//! Sequence classifier: token embeddings, an encoder and an MLP head.

use std::collections::BTreeMap;
use std::path::Path;

use blosan_core::attention::{Source2Token, Validity};
use blosan_core::blosa::io::{load_model, save_model};
use blosan_core::blosa::{BiBlosan, Embedding};
use blosan_core::heads::Classifier;
use blosan_core::rng::{stream, Stream};
use blosan_core::{NodeId, ParamStore, Session};

use crate::config::{parse_kv, Arch, RunConfig};
use crate::error::{CliError, Result};
use crate::task::{Example, PAD};

/// Scalar type used for training and checkpoints.
pub type Float = f32;

enum Encoder {
    Blosan(BiBlosan),
    S2tOnly(Source2Token),
}

pub struct SequenceModel {
    pub cfg: RunConfig,
    pub store: ParamStore<Float>,
    embedding: Embedding,
    encoder: Encoder,
    classifier: Classifier,
}

/// Padded token ids `[b, n]` with their validity.
pub struct Batch {
    pub ids: Vec<usize>,
    pub b: usize,
    pub n: usize,
    pub tokens: Validity,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let b = examples.len();
        let n = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; b * n];
        for (row, ex) in examples.iter().enumerate() {
            ids[row * n..row * n + ex.tokens.len()].copy_from_slice(&ex.tokens);
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
        Ok(Batch {
            ids,
            b,
            n,
            tokens: Validity::from_lengths(&lengths, n)?,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }
}

impl SequenceModel {
    /// Builds a freshly initialized model from the run seed.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Init);
        let mut store = ParamStore::new();
        let d_e = cfg.encoder.d_e;
        let embedding = Embedding::init(&mut store, "embed", cfg.task.vocab, d_e, &mut rng)?;
        let (encoder, d_s) = match cfg.train.arch {
            Arch::Blosan => {
                let enc = BiBlosan::init(&mut store, "encoder", &cfg.encoder, &mut rng)?;
                let d = enc.output_dim();
                (Encoder::Blosan(enc), d)
            }
            Arch::S2tOnly => (Encoder::S2tOnly(Source2Token::init(&mut store, "encoder/s2t", d_e, &mut rng)?), d_e),
        };
        let classifier = Classifier::init(&mut store, "classifier", d_s, cfg.train.hidden, cfg.task.num_classes(), &mut rng)?;
        Ok(SequenceModel {
            cfg: cfg.clone(),
            store,
            embedding,
            encoder,
            classifier,
        })
    }

    /// Logits `[b, classes]`.
    pub fn logits(&self, sess: &mut Session<Float>, batch: &Batch) -> Result<NodeId> {
        let x = self.embedding.lookup(sess, &batch.ids, &[batch.b, batch.n])?;
        let s = match &self.encoder {
            Encoder::Blosan(enc) => enc.encode(sess, x, Some(&batch.tokens))?,
            Encoder::S2tOnly(s2t) => {
                let x = sess.dropout(x, self.cfg.encoder.keep_prob)?;
                s2t.forward(sess, x, Some(&batch.tokens))?
            }
        };
        Ok(self.classifier.logits(sess, s)?)
    }

    /// Predicted class per example.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut sess = Session::new(&self.store);
        let logits = self.logits(&mut sess, batch)?;
        let value = sess.graph.value(logits);
        let k = value.shape()[1];
        Ok(value
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, Float::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of `examples` classified correctly, in batches of the
    /// configured size.
    pub fn accuracy(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for chunk in examples.chunks(self.cfg.encoder.batch_size) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let pred = self.predict(&batch)?;
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_model(path, &self.cfg.to_kv(), &self.store)?)
    }

    /// Rebuilds the model described by a checkpoint and loads its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let (kv, store) = load_model::<Float>(path)?;
        let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_kv(&text)?)?;
        let mut model = SequenceModel::init(&cfg)?;
        let expected: BTreeMap<&str, Vec<usize>> = model.store.iter().map(|(p, v)| (p, v.value.shape().to_vec())).collect();
        let found: BTreeMap<&str, Vec<usize>> = store.iter().map(|(p, v)| (p, v.value.shape().to_vec())).collect();
        if expected != found {
            return Err(CliError::Config(format!(
                "{}: parameters do not match the stored configuration",
                path.display()
            )));
        }
        model.store = store;
        Ok(model)
    }
}
