//! Implementations behind the `blosan` subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use blosan_core::autodiff::gradcheck::{check_all_ops, check_params, GradCheckReport};
use blosan_core::bench::{scaling_experiment, write_csv, ModelKind, ProfileOptions, ScalingReport};
use blosan_core::blosa::{
    brute_force_block_length, select_block_length, select_block_length_batched, xi, BiBlosan, BlockLength, EncoderConfig,
};
use blosan_core::heads::{cross_entropy, NliHead};
use blosan_core::init::uniform;
use blosan_core::rng::{stream, Stream};
use blosan_core::{ParamKind, ParamStore};

use crate::error::{io_err, Result};

/// Block length, block count and cost around the chosen `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLenReport {
    pub n: usize,
    pub r: usize,
    pub m: usize,
    /// `(r', xi(n, r'))` for `r' = r - 1, r, r + 1` within `[1, n]`.
    pub neighbors: Vec<(usize, usize)>,
    /// Exhaustive minimizer and its cost.
    pub best: (usize, usize),
}

impl BlockLenReport {
    pub fn render(&self) -> String {
        let mut s = format!("n={} r={} m={}\n", self.n, self.r, self.m);
        s.push_str("r\txi\n");
        for (r, cost) in &self.neighbors {
            let _ = writeln!(s, "{r}\t{cost}");
        }
        let _ = writeln!(s, "brute-force optimum: r={} xi={}", self.best.0, self.best.1);
        s
    }
}

/// Table for a sequence of length `n` with block length `r`.
pub fn blocklen_table(n: usize, r: usize) -> BlockLenReport {
    let r = r.clamp(1, n.max(1));
    let neighbors = [r.wrapping_sub(1), r, r + 1]
        .into_iter()
        .filter(|&k| (1..=n).contains(&k))
        .map(|k| (k, xi(n, k)))
        .collect();
    BlockLenReport {
        n,
        r,
        m: n.div_ceil(r),
        neighbors,
        best: brute_force_block_length(n),
    }
}

/// Block length for a single length `n`.
pub fn blocklen_for_length(n: usize) -> Result<BlockLenReport> {
    Ok(blocklen_table(n, select_block_length(n)?))
}

/// Block length for batches of `batch` lengths with mean `mu` and deviation
/// `sigma`; the table is computed at the expected longest length.
pub fn blocklen_for_stats(mu: f64, sigma: f64, batch: usize) -> Result<BlockLenReport> {
    let r = select_block_length_batched(mu, sigma, batch)?;
    let n = (sigma * (2.0 * (batch as f64).ln()).sqrt() + mu).ceil().max(1.0) as usize;
    Ok(blocklen_table(n, r))
}

/// Settings for the end-to-end gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub n: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub r: usize,
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            n: 12,
            d_e: 8,
            d_h: 8,
            r: 2,
            step: 1e-5,
        }
    }
}

/// Finite-difference check of a Bi-BloSAN encoder with a three-way relation
/// head on a random premise/hypothesis pair, in float64 with dropout off.
///
/// The two inputs are checked alongside the parameters under
/// `input/premise` and `input/hypothesis`. Biases are drawn at random so no
/// relu sits exactly on its kink.
pub fn encoder_gradcheck(opts: &GradCheckOptions) -> Result<BTreeMap<String, GradCheckReport>> {
    let cfg = EncoderConfig {
        d_e: opts.d_e,
        d_h: opts.d_h,
        block_len: BlockLength::Fixed(opts.r),
        ..EncoderConfig::default()
    };
    let mut rng = stream(opts.seed, Stream::Init);
    let mut store = ParamStore::<f64>::new();
    let enc = BiBlosan::init(&mut store, "encoder", &cfg, &mut rng)?;
    let head = NliHead::init(&mut store, "nli", enc.output_dim(), opts.d_h, &mut rng)?;
    let mut data = stream(opts.seed, Stream::Data);
    let biases: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Bias)
        .map(|(k, _)| k.to_string())
        .collect();
    for path in biases {
        let len = store.get(&path)?.len();
        store.set(&path, uniform(&[len], -0.5, 0.5, &mut data)?)?;
    }
    for name in ["premise", "hypothesis"] {
        let x = uniform(&[opts.n, opts.d_e], -1.0, 1.0, &mut data)?;
        store.insert(format!("input/{name}"), x, ParamKind::Embedding)?;
    }
    let label = (opts.seed % NliHead::CLASSES as u64) as usize;
    Ok(check_params(
        &store,
        |sess| {
            let p = sess.param("input/premise")?;
            let h = sess.param("input/hypothesis")?;
            let sp = enc.encode(sess, p, None)?;
            let sh = enc.encode(sess, h, None)?;
            let logits = head.logits(sess, sp, sh)?;
            cross_entropy(&mut sess.graph, logits, &[label])
        },
        opts.step,
    )?)
}

/// Per-op checks at `points` random points each.
pub fn op_gradcheck(points: usize, step: f64) -> Result<Vec<(String, GradCheckReport)>> {
    Ok(check_all_ops(points, step)?)
}

/// Runs the scaling sweep and writes `bench.csv` under `out` when given.
pub fn bench(lengths: &[usize], kinds: &[ModelKind], opts: &ProfileOptions, out: Option<&Path>) -> Result<ScalingReport> {
    let report = scaling_experiment(lengths, kinds, opts)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("bench.csv");
        let file = std::fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = std::io::BufWriter::new(file);
        write_csv(&mut w, &report.records)?;
        w.flush().map_err(io_err(&path))?;
    }
    Ok(report)
}
