//! Mini-batch training with periodic validation and best checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use blosan_core::heads::{cross_entropy, objective, Optimizer};
use blosan_core::rng::{stream, Stream};
use blosan_core::Session;
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use crate::model::{Batch, SequenceModel};
use crate::task::{generate_task, Dataset, Example};

pub const METRICS_HEADER: &str = "step,loss,val_acc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.blosan";
pub const CONFIG_FILE: &str = "config.txt";

/// Stream used to shuffle training examples between epochs.
const SHUFFLE_STREAM: Stream = Stream::Other(1);

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub model_path: PathBuf,
    /// `(step, validation accuracy)` for every validation pass, step 0
    /// included.
    pub evals: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_acc: f64,
}

impl TrainOutcome {
    pub fn final_val_acc(&self) -> f64 {
        self.evals.last().map_or(0.0, |e| e.1)
    }

    /// Best accuracy among validation passes at or before `step`.
    pub fn best_by(&self, step: usize) -> f64 {
        self.evals
            .iter()
            .filter(|e| e.0 <= step)
            .map(|e| e.1)
            .fold(0.0, f64::max)
    }
}

/// Cycles through shuffled training examples, reshuffling every epoch.
struct Batcher<'a> {
    data: &'a [Example],
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: blosan_core::rng::Rng,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a [Example], batch: usize, seed: u64) -> Self {
        Batcher {
            data,
            order: (0..data.len()).collect(),
            pos: data.len(),
            batch,
            rng: stream(seed, SHUFFLE_STREAM),
        }
    }

    fn next_batch(&mut self) -> Vec<&'a Example> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch.min(self.data.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(&self.data[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

fn metrics_row(step: usize, loss: Option<f64>, acc: Option<f64>) -> String {
    let loss = loss.map_or(String::new(), |l| format!("{l:.6}"));
    let acc = acc.map_or(String::new(), |a| format!("{a:.4}"));
    format!("{step},{loss},{acc}\n")
}

/// Trains on a freshly generated task and writes `metrics.csv`,
/// `config.txt` and the best-validation checkpoint `model.blosan` to
/// `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_task(&cfg.task, cfg.seed)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let out = cfg.out.as_path();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
    let metrics_path = out.join(METRICS_FILE);
    let model_path = out.join(MODEL_FILE);
    let file = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    let mut write = |line: &str, path: &Path| metrics.write_all(line.as_bytes()).map_err(io_err(path));
    write(&format!("{METRICS_HEADER}\n"), &metrics_path)?;

    let mut model = SequenceModel::init(cfg)?;
    let mut optimizer = Optimizer::new(cfg.train.optimizer, cfg.train.lr)?;
    let mut batches = Batcher::new(&data.train, cfg.encoder.batch_size, cfg.seed);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let interval = cfg.eval_interval();

    let acc = model.accuracy(&data.val)?;
    let mut evals = vec![(0, acc)];
    let (mut best_step, mut best_val_acc) = (0, acc);
    model.save(&model_path)?;
    write(&metrics_row(0, None, Some(acc)), &metrics_path)?;

    for step in 1..=cfg.train.steps {
        let batch = Batch::new(&batches.next_batch())?;
        let (loss, grads) = {
            let mut sess = Session::training(&model.store, &mut dropout_rng);
            let logits = model.logits(&mut sess, &batch)?;
            let ce = cross_entropy(&mut sess.graph, logits, &batch.labels)?;
            let total = objective(&mut sess, ce, cfg.train.gamma)?;
            let loss = sess.graph.value(ce).data()[0] as f64;
            let total_value = sess.graph.value(total).data()[0] as f64;
            if !total_value.is_finite() {
                return Err(CliError::Diverged { step, loss: total_value });
            }
            let g = sess.graph.backward_leaves(total)?;
            (loss, sess.param_grads(&g))
        };
        optimizer.step(&mut model.store, &grads)?;

        let acc = if step % interval == 0 || step == cfg.train.steps {
            let acc = model.accuracy(&data.val)?;
            evals.push((step, acc));
            if acc > best_val_acc {
                best_val_acc = acc;
                best_step = step;
                model.save(&model_path)?;
            }
            Some(acc)
        } else {
            None
        };
        write(&metrics_row(step, Some(loss), acc), &metrics_path)?;
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    Ok(TrainOutcome {
        metrics_path,
        model_path,
        evals,
        best_step,
        best_val_acc,
    })
}

/// Validation accuracy of a checkpoint on the task regenerated from its
/// stored configuration.
pub fn evaluate(model_path: &Path) -> Result<f64> {
    let model = SequenceModel::load(model_path)?;
    let data = generate_task(&model.cfg.task, model.cfg.seed)?;
    model.accuracy(&data.val)
}
