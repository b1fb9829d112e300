use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use blosan_cli::commands::{
    bench, blocklen_for_length, blocklen_for_stats, encoder_gradcheck, op_gradcheck, GradCheckOptions,
};
use blosan_cli::config::RunConfig;
use blosan_cli::{evaluate, train};
use blosan_core::autodiff::gradcheck::worst;
use blosan_core::bench::{ModelKind, ProfileOptions};
use blosan_core::blosa::BlockLength;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blosan", version, about = "Bi-BloSAN sequence encoder: training, benchmarks and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on a synthetic task.
    Train(TrainArgs),
    /// Validation accuracy of a saved checkpoint.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Memory and time sweep over sequence lengths.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Block length selection table.
    Blocklen(BlocklenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    /// Block length: `auto` or an integer.
    #[arg(long)]
    r: Option<String>,
    #[arg(long = "d-e")]
    d_e: Option<String>,
    #[arg(long = "d-h")]
    d_h: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long = "keep-prob")]
    keep_prob: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    /// `adadelta` or `adam`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// `directional` or `none`.
    #[arg(long = "mask-mode")]
    mask_mode: Option<String>,
    /// `blosan` or `s2t`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn overrides(&self) -> anyhow::Result<BTreeMap<String, String>> {
        let flags = [
            ("seed", &self.seed),
            ("task", &self.task),
            ("vocab", &self.vocab),
            ("mu", &self.mu),
            ("sigma", &self.sigma),
            ("classes", &self.classes),
            ("r", &self.r),
            ("d_e", &self.d_e),
            ("d_h", &self.d_h),
            ("batch", &self.batch),
            ("keep_prob", &self.keep_prob),
            ("gamma", &self.gamma),
            ("optimizer", &self.optimizer),
            ("lr", &self.lr),
            ("steps", &self.steps),
            ("mask_mode", &self.mask_mode),
            ("arch", &self.arch),
            ("out", &self.out),
        ];
        let mut kv: BTreeMap<String, String> = flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for item in &self.set {
            let Some((k, v)) = item.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{item}`");
            };
            kv.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(kv)
    }

    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides()?)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated ascending lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 192, 256, 320, 384, 448, 512])]
    lengths: Vec<usize>,
    /// Single length; overrides `--lengths` with `n/2, n`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("biblosa"), String::from("full_san")])]
    kinds: Vec<String>,
    #[arg(long = "d-e", default_value_t = 32)]
    d_e: usize,
    #[arg(long = "d-h", default_value_t = 32)]
    d_h: usize,
    #[arg(long, default_value = "auto")]
    r: BlockLength,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `bench.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long = "d-e", default_value_t = 8)]
    d_e: usize,
    #[arg(long = "d-h", default_value_t = 8)]
    d_h: usize,
    #[arg(long, default_value_t = 2)]
    r: usize,
    /// Random points per op.
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args)]
struct BlocklenArgs {
    #[arg(long, conflicts_with_all = ["mu", "sigma"])]
    n: Option<usize>,
    #[arg(long, requires = "sigma")]
    mu: Option<f64>,
    #[arg(long, requires = "mu")]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.run_config()?;
            let outcome = train(&cfg)?;
            println!(
                "best val_acc={:.4} at step {}; final val_acc={:.4}",
                outcome.best_val_acc,
                outcome.best_step,
                outcome.final_val_acc()
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("model: {}", outcome.model_path.display());
        }
        Command::Eval { model } => {
            let acc = evaluate(&model).with_context(|| format!("evaluating {}", model.display()))?;
            println!("val_acc={acc:.4}");
        }
        Command::Bench(args) => {
            let lengths = match args.n {
                Some(n) => vec![(n / 2).max(1), n.max(2)],
                None => args.lengths.clone(),
            };
            let kinds = args
                .kinds
                .iter()
                .map(|k| k.parse::<ModelKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let opts = ProfileOptions {
                d_e: args.d_e,
                d_h: args.d_h,
                r: match args.r {
                    BlockLength::Auto => None,
                    BlockLength::Fixed(r) => Some(r),
                },
                repeats: args.repeats,
                seed: args.seed,
                limit: None,
            };
            let report = bench(&lengths, &kinds, &opts, args.out.as_deref())?;
            println!("{}", blosan_core::bench::CSV_HEADER);
            for rec in &report.records {
                println!("{}", rec.to_csv_row());
            }
            for kind in &kinds {
                println!(
                    "{kind}: activation slope {:.3}, forward+backward slope {:.3}",
                    report.slope(*kind).unwrap_or(f64::NAN),
                    report.train_slope(*kind).unwrap_or(f64::NAN)
                );
            }
        }
        Command::Gradcheck(args) => {
            let ops = op_gradcheck(args.points, args.step)?;
            let op_max = ops.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
            for (name, r) in &ops {
                println!("op {name:<24} max_rel_error={:.3e}", r.max_rel_error);
            }
            println!("ops: worst relative error {op_max:.3e}");
            let opts = GradCheckOptions {
                seed: args.seed,
                n: args.n,
                d_e: args.d_e,
                d_h: args.d_h,
                r: args.r,
                step: args.step,
            };
            let reports = encoder_gradcheck(&opts)?;
            for (path, r) in &reports {
                println!(
                    "param {path:<28} max_rel_error={:.3e} (analytic {:.3e}, numeric {:.3e})",
                    r.max_rel_error, r.analytic, r.numeric
                );
            }
            if let Some((path, r)) = worst(&reports) {
                println!("encoder: worst relative error {:.3e} at {path}", r.max_rel_error);
            }
        }
        Command::Blocklen(args) => {
            let report = match (args.n, args.mu, args.sigma) {
                (Some(n), _, _) => blocklen_for_length(n)?,
                (None, Some(mu), Some(sigma)) => blocklen_for_stats(mu, sigma, args.batch)?,
                _ => bail!("blocklen needs --n or --mu with --sigma"),
            };
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
