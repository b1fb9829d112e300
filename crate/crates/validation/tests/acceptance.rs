//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use blosan_cli::commands::{encoder_gradcheck, GradCheckOptions};
use blosan_cli::model::SequenceModel;
use blosan_cli::{evaluate, train, RunConfig, TrainOutcome};
use blosan_core::attention::{build_mask, MaskKind, MaskedSelfAttention};
use blosan_core::autodiff::gradcheck::{check_all_ops, GradCheckReport};
use blosan_core::bench::{scaling_experiment, ModelKind, ProfileOptions, ScalingReport};
use blosan_core::blosa::{select_block_length, BlockPlan, MBlosa};
use blosan_core::heads::map_target;
use blosan_core::init::uniform;
use blosan_core::rng::{stream, Stream};
use blosan_core::{ParamKind, ParamStore, Session, Tensor};
use rand::Rng;

const SWEEP: [usize; 8] = [64, 128, 192, 256, 320, 384, 448, 512];
const TRAIN_STEPS: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn worst_of<'a>(reports: impl Iterator<Item = (&'a str, &'a GradCheckReport)>) -> (&'a str, &'a GradCheckReport) {
    reports.max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error)).expect("at least one report")
}

fn encoder_check(step: f64) -> BTreeMap<String, GradCheckReport> {
    let opts = GradCheckOptions {
        n: 12,
        d_e: 8,
        d_h: 8,
        r: 2,
        step,
        ..Default::default()
    };
    encoder_gradcheck(&opts).expect("encoder check runs")
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let ops = check_all_ops(10, 1e-5).expect("op checks run");
    let (op, op_worst) = worst_of(ops.iter().map(|(k, r)| (k.as_str(), r)));
    let op_err = op_worst.max_rel_error;

    let enc = encoder_check(1e-5);
    let (param, w) = worst_of(enc.iter().map(|(k, r)| (k.as_str(), r)));
    let enc_err = w.max_rel_error;
    let violations: usize = enc.values().map(|r| r.violations(1e-4)).sum();
    let checked: usize = enc.values().map(|r| r.checked).sum();
    let coarse = encoder_check(1e-3);
    let (coarse_param, coarse_worst) = worst_of(coarse.iter().map(|(k, r)| (k.as_str(), r)));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        op_err < 1e-6 && enc_err < 1e-4 && secs < 120.0,
        format!(
            "ops worst {op_err:.2e} ({op}); encoder+nli worst {enc_err:.2e} at {param} \
             (analytic {:.4e}, numeric {:.4e}, abs {:.1e}, rounding floor {:.1e}); \
             {violations}/{checked} coordinates above 1e-4 and the rounding floor; \
             step 1e-3 worst {:.2e} ({coarse_param}); {secs:.1}s",
            w.analytic,
            w.numeric,
            (w.analytic - w.numeric).abs(),
            w.noise_floor(),
            coarse_worst.max_rel_error,
        ),
    )
}

fn xi(n: usize, r: usize) -> usize {
    let m = n.div_ceil(r);
    r * r * m + m * m
}

fn block_length_optimum() -> Outcome {
    let start = Instant::now();
    let mut worst = (0usize, 0usize);
    for n in 16..=512 {
        let best = (1..=n).map(|r| xi(n, r)).min().unwrap();
        let chosen = select_block_length(n).expect("valid length");
        let gap = (1..=n).filter(|&r| xi(n, r) == best).map(|r| r.abs_diff(chosen)).min().unwrap();
        if gap > worst.0 {
            worst = (gap, n);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1 && secs < 10.0,
        format!("max distance to a brute-force minimizer {} (n={}); {secs:.2}s", worst.0, worst.1),
    )
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn memory_scaling(report: &ScalingReport, secs: f64) -> Outcome {
    let blosa = report.slope(ModelKind::BiBlosa).unwrap();
    let full = report.slope(ModelKind::FullSan).unwrap();
    let b512 = report.record(ModelKind::BiBlosa, 512).unwrap().measured_peak_elems;
    let f512 = report.record(ModelKind::FullSan, 512).unwrap().measured_peak_elems;
    let ratio = f512 as f64 / b512 as f64;
    let tensor_bytes = report
        .records
        .iter()
        .map(|r| r.train_peak_elems.unwrap_or(r.measured_peak_elems) as u64 * 4)
        .max()
        .unwrap();
    let rss = peak_rss_bytes();
    let bytes = rss.unwrap_or(tensor_bytes).max(tensor_bytes);
    let gb = bytes as f64 / (1u64 << 30) as f64;
    outcome(
        (1.25..=1.50).contains(&blosa) && (1.90..=2.10).contains(&full) && ratio >= 5.0 && secs < 300.0 && gb < 4.0,
        format!(
            "slope bi-blosa {blosa:.4}, full-san {full:.4}; peak ratio at 512 {ratio:.1}x; \
             training-pass slopes {:.4}/{:.4}; {gb:.2} GB peak; sweep {secs:.1}s",
            report.train_slope(ModelKind::BiBlosa).unwrap(),
            report.train_slope(ModelKind::FullSan).unwrap(),
        ),
    )
}

fn time_scaling(report: &ScalingReport) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for &n in SWEEP.iter().filter(|&&n| n >= 256) {
        let b = report.record(ModelKind::BiBlosa, n).unwrap().forward_ms;
        let f = report.record(ModelKind::FullSan, n).unwrap().forward_ms;
        pass &= b <= f;
        parts.push(format!("n={n} {b:.1}/{f:.1}ms"));
    }
    outcome(pass, format!("median forward bi-blosa/full-san: {}", parts.join(", ")))
}

fn order_pair_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/order-pair.conf");
    RunConfig::from_file(&path).expect("order-pair config loads")
}

fn run(cfg: &RunConfig, out: PathBuf) -> (TrainOutcome, f64) {
    let mut cfg = cfg.clone();
    cfg.out = out;
    let start = Instant::now();
    let result = train(&cfg).expect("training run completes");
    (result, start.elapsed().as_secs_f64())
}

fn acc_at(out: &TrainOutcome, step: usize) -> f64 {
    out.evals.iter().find(|(s, _)| *s == step).map(|&(_, a)| a).expect("evaluation at step")
}

fn temporal_order(full: &TrainOutcome, full_secs: f64, ablated: &TrainOutcome, ablated_secs: f64) -> Outcome {
    let reached = full.best_by(TRAIN_STEPS);
    let first = full.evals.iter().find(|(_, a)| *a >= 0.95).map(|&(s, _)| s);
    let ablated_max = ablated.evals.iter().map(|&(_, a)| a).fold(0.0, f64::max);
    let secs = full_secs + ablated_secs;
    outcome(
        reached >= 0.95 && ablated_max <= 0.60 && secs < 600.0,
        format!(
            "directional best {reached:.4} (first >= 0.95 at step {}); mask-none max {ablated_max:.4}; {secs:.0}s",
            first.map_or("-".to_string(), |s| s.to_string())
        ),
    )
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, &mut stream(seed, Stream::Data)).unwrap()
}

fn with_random_biases(store: &mut ParamStore<f64>, seed: u64) {
    let biases: Vec<String> = store.iter().filter(|(_, p)| p.kind == ParamKind::Bias).map(|(k, _)| k.to_string()).collect();
    for (i, path) in biases.iter().enumerate() {
        let len = store.get(path).unwrap().len();
        store.set(path, random(&[len], seed * 97 + i as u64).map(|v| 0.5 * v).unwrap()).unwrap();
    }
}

/// Adds noise to every token for which `hit` holds.
fn perturb(x: &Tensor<f64>, d: usize, seed: u64, hit: impl Fn(usize) -> bool) -> Tensor<f64> {
    let noise = random(x.shape(), seed);
    Tensor::from_fn(x.shape(), |k| x.data()[k] + if hit(k / d) { 3.0 * noise.data()[k] } else { 0.0 })
}

fn row_diff(a: &Tensor<f64>, b: &Tensor<f64>, j: usize, d: usize) -> f64 {
    (0..d).map(|k| (a.data()[j * d + k] - b.data()[j * d + k]).abs()).fold(0.0, f64::max)
}

fn masking_causality() -> Outcome {
    const D: usize = 4;
    let mut rng = stream(2024, Stream::Other(7));
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for trial in 0..100u64 {
        let n = rng.gen_range(2..=16);
        let r = rng.gen_range(1..=n.min(6));
        let plan = BlockPlan::new(n, r).unwrap();
        let x = random(&[n, D], 10_000 + trial);
        for kind in [MaskKind::Forward, MaskKind::Backward] {
            let forward = kind == MaskKind::Forward;
            let j = rng.gen_range(0..n);
            let later = |t: usize| if forward { t > j } else { t < j };
            let later_block = |t: usize| {
                let (bt, bj) = (plan.block_of(t), plan.block_of(j));
                if forward {
                    bt > bj
                } else {
                    bt < bj
                }
            };
            let single = if forward { (j + 1..n).collect::<Vec<_>>() } else { (0..j).collect() };
            let pick = (!single.is_empty()).then(|| single[rng.gen_range(0..single.len())]);

            let mut store = ParamStore::new();
            let attn = MaskedSelfAttention::init(&mut store, "a", D, 5.0, &mut stream(trial, Stream::Init)).unwrap();
            with_random_biases(&mut store, trial);
            let mask = build_mask(n, kind).unwrap();
            let eval = |input: Tensor<f64>| {
                let mut sess = Session::new(&store);
                let xi = sess.input(input);
                let out = attn.forward(&mut sess, xi, &mask, None).unwrap();
                sess.graph.value(out.output).clone()
            };
            let base = eval(x.clone());
            worst = worst.max(row_diff(&base, &eval(perturb(&x, D, 20_000 + trial, later)), j, D));
            if let Some(p) = pick {
                worst = worst.max(row_diff(&base, &eval(perturb(&x, D, 30_000 + trial, |t| t == p)), j, D));
            }

            let mut store = ParamStore::new();
            let m = MBlosa::init(&mut store, "m", D, kind, 5.0, &mut stream(trial + 500, Stream::Init)).unwrap();
            with_random_biases(&mut store, trial + 500);
            let eval = |input: Tensor<f64>| {
                let mut sess = Session::new(&store);
                let xi = sess.input(input);
                let out = m.forward(&mut sess, xi, r, None).unwrap();
                sess.graph.value(out).clone()
            };
            let base = eval(x.clone());
            worst = worst.max(row_diff(&base, &eval(perturb(&x, D, 40_000 + trial, later_block)), j, D));
            cases += 2;
        }
    }
    outcome(worst < 1e-12, format!("{cases} masked checks over 100 trials; max abs diff {worst:.1e}"))
}

fn ordinal_mapping() -> Outcome {
    const K: usize = 5;
    let expectation = |p: &[f64]| p.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum::<f64>();
    let mut rng = stream(7, Stream::Other(9));
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let y = rng.gen_range(1.0..=5.0);
        let p = map_target(y, K).unwrap().p;
        worst = worst.max((expectation(&p) - y).abs());
    }
    let exact: [(f64, [f64; K]); 4] = [
        (1.0, [1.0, 0.0, 0.0, 0.0, 0.0]),
        (2.0, [0.0, 1.0, 0.0, 0.0, 0.0]),
        (3.6, [0.0, 0.0, 0.4, 0.6, 0.0]),
        (5.0, [0.0, 0.0, 0.0, 0.0, 1.0]),
    ];
    let mut exact_ok = true;
    for (y, want) in exact {
        let p = map_target(y, K).unwrap().p;
        exact_ok &= p.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
        let e = expectation(&p);
        exact_ok &= (e - y).abs() < 1e-12;
        worst = worst.max((e - y).abs());
    }
    outcome(
        worst < 1e-12 && exact_ok,
        format!("max |beta.p - y| {worst:.1e} over 204 targets; fixed points {}", if exact_ok { "match" } else { "differ" }),
    )
}

fn ablation_direction(full: &TrainOutcome, s2t: &TrainOutcome) -> Outcome {
    let (a, b) = (acc_at(full, TRAIN_STEPS), acc_at(s2t, TRAIN_STEPS));
    outcome(
        a - b >= 0.10,
        format!("step {TRAIN_STEPS}: bi-blosan {a:.4}, source2token-only {b:.4}, gap {:.1} points", 100.0 * (a - b)),
    )
}

fn reproducibility(first: &TrainOutcome, second: &TrainOutcome, scratch: &Path) -> Outcome {
    let a = std::fs::read(&first.metrics_path).unwrap();
    let b = std::fs::read(&second.metrics_path).unwrap();
    let identical = a == b;
    let stored = evaluate(&first.model_path).unwrap();
    let model = SequenceModel::load(&first.model_path).unwrap();
    let copy = scratch.join("round-trip.blosan");
    model.save(&copy).unwrap();
    let reloaded = evaluate(&copy).unwrap();
    let round_trip = stored == reloaded && stored == first.best_val_acc;
    outcome(
        identical && round_trip,
        format!(
            "metrics {} ({} bytes); checkpoint accuracy {stored:.4}, after save/load {reloaded:.4}, recorded best {:.4}",
            if identical { "byte-identical" } else { "differ" },
            a.len(),
            first.best_val_acc
        ),
    )
}

fn report(id: usize, name: &str, o: &Outcome) -> bool {
    println!("criterion {id} {name}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() -> ExitCode {
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&scratch);
    std::fs::create_dir_all(&scratch).unwrap();
    let mut results = Vec::new();

    results.push(report(1, "gradient correctness", &gradient_correctness()));
    results.push(report(2, "block-length optimum", &block_length_optimum()));

    let opts = ProfileOptions {
        d_e: 32,
        d_h: 32,
        r: None,
        repeats: 5,
        ..ProfileOptions::default()
    };
    let start = Instant::now();
    let sweep = scaling_experiment(&SWEEP, &ModelKind::ALL, &opts).expect("sweep runs");
    let sweep_secs = start.elapsed().as_secs_f64();
    results.push(report(3, "memory scaling", &memory_scaling(&sweep, sweep_secs)));
    results.push(report(4, "time scaling", &time_scaling(&sweep)));

    let cfg = order_pair_config();
    let (full, full_secs) = run(&cfg, scratch.join("directional"));
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.set("mask_mode", "none").unwrap();
    let (ablated, ablated_secs) = run(&ablated_cfg, scratch.join("mask-none"));
    results.push(report(5, "temporal-order encoding", &temporal_order(&full, full_secs, &ablated, ablated_secs)));

    results.push(report(6, "masking causality", &masking_causality()));
    results.push(report(7, "ordinal target mapping", &ordinal_mapping()));

    let mut s2t_cfg = cfg.clone();
    s2t_cfg.set("arch", "s2t").unwrap();
    let (s2t, _) = run(&s2t_cfg, scratch.join("s2t-only"));
    results.push(report(8, "ablation direction", &ablation_direction(&full, &s2t)));

    let (again, _) = run(&cfg, scratch.join("directional-rerun"));
    results.push(report(9, "reproducibility", &reproducibility(&full, &again, &scratch)));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
