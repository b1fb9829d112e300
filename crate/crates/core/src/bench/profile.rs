use std::collections::BTreeMap;
use std::time::Instant;

use super::cost::count_score_elements;
use super::report::{fit_loglog_slope, ProfileRecord};
use super::ModelKind;
use crate::attention::{build_mask, MaskKind, MaskedSelfAttention, DEFAULT_SCORE_SCALE};
use crate::autodiff::NodeId;
use crate::blosa::{select_block_length, BiBlosa};
use crate::error::{invalid, shape_err, Result};
use crate::init::uniform;
use crate::params::{ParamStore, Session};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::memory;

/// Bi-directional masked self-attention over the whole sequence: the
/// [`BiBlosa`] layer without block structure.
///
/// Each direction projects with an FC layer, attends over all `n` tokens and
/// fuses the result with its input through a gate.
#[derive(Debug, Clone)]
pub struct FullSan {
    prefix: String,
    pub d_e: usize,
    pub d_h: usize,
    fw: MaskedSelfAttention,
    bw: MaskedSelfAttention,
}

impl FullSan {
    pub fn init(store: &mut ParamStore<f32>, prefix: &str, d_e: usize, d_h: usize, c: f64, rng: &mut Rng) -> Result<Self> {
        for dir in ["fw", "bw"] {
            store.add_weight(format!("{prefix}/{dir}/fc/w"), d_e, d_h, rng)?;
            store.add_bias(format!("{prefix}/{dir}/fc/b"), d_h)?;
            store.add_weight(format!("{prefix}/{dir}/fusion/w1"), 2 * d_h, d_h, rng)?;
            store.add_bias(format!("{prefix}/{dir}/fusion/b1"), d_h)?;
            store.add_weight(format!("{prefix}/{dir}/fusion/w2"), 2 * d_h, d_h, rng)?;
            store.add_bias(format!("{prefix}/{dir}/fusion/b2"), d_h)?;
        }
        let fw = MaskedSelfAttention::init(store, &format!("{prefix}/fw/attn"), d_h, c, rng)?;
        let bw = MaskedSelfAttention::init(store, &format!("{prefix}/bw/attn"), d_h, c, rng)?;
        Ok(FullSan {
            prefix: prefix.to_string(),
            d_e,
            d_h,
            fw,
            bw,
        })
    }

    fn branch(&self, sess: &mut Session<f32>, dir: &str, attn: &MaskedSelfAttention, kind: MaskKind, x: NodeId) -> Result<NodeId> {
        let p = |name: &str| format!("{}/{dir}/{name}", self.prefix);
        let n = sess.graph.shape(x)[sess.graph.rank(x) - 2];
        let (w, b) = (sess.param(&p("fc/w"))?, sess.param(&p("fc/b"))?);
        let (w1, b1) = (sess.param(&p("fusion/w1"))?, sess.param(&p("fusion/b1"))?);
        let (w2, b2) = (sess.param(&p("fusion/w2"))?, sess.param(&p("fusion/b2"))?);
        let h = sess.graph.linear(x, w, b)?;
        let h = sess.graph.relu(h)?;
        let mask = build_mask(n, kind)?;
        let ctx = attn.forward(sess, h, &mask, None)?.output;
        let g = &mut sess.graph;
        let cat = g.concat_last(&[h, ctx])?;
        let f = g.linear(cat, w1, b1)?;
        let f = g.relu(f)?;
        let z = g.linear(cat, w2, b2)?;
        let gate = g.sigmoid(z)?;
        g.gate(gate, f, h)
    }

    /// `x [.., n, d_e]` -> `[.., n, 2 d_h]`.
    pub fn forward(&self, sess: &mut Session<f32>, x: NodeId) -> Result<NodeId> {
        let shape = sess.graph.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d_e {
            return Err(shape_err("full_san", format!("expected [.., n, {}], got {shape:?}", self.d_e)));
        }
        let u_fw = self.branch(sess, "fw", &self.fw, MaskKind::Forward, x)?;
        let u_bw = self.branch(sess, "bw", &self.bw, MaskKind::Backward, x)?;
        sess.graph.concat_last(&[u_fw, u_bw])
    }
}

/// Settings shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct ProfileOptions {
    pub d_e: usize,
    pub d_h: usize,
    /// Fixed block length; chosen per `n` when `None`.
    pub r: Option<usize>,
    /// Timed repeats after one warm-up pass.
    pub repeats: usize,
    pub seed: u64,
    /// Cap on live working elements; exceeding it is an out-of-memory error.
    pub limit: Option<usize>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            d_e: 32,
            d_h: 32,
            r: None,
            repeats: 3,
            seed: 0,
            limit: None,
        }
    }
}

enum Model {
    Blocked(BiBlosa),
    Full(FullSan),
}

struct Sample {
    forward_peak: usize,
    train_peak: usize,
    forward_ms: f64,
    backward_ms: f64,
}

fn run_once(model: &Model, store: &ParamStore<f32>, x: &crate::tensor::Tensor<f32>, r: usize) -> Result<Sample> {
    memory::reset_peak();
    let base = memory::snapshot().live;
    let mut sess = Session::new(store);
    let input = sess.input(x.clone());
    let start = Instant::now();
    let out = match model {
        Model::Blocked(layer) => layer.forward(&mut sess, input, r, None)?,
        Model::Full(layer) => layer.forward(&mut sess, input)?,
    };
    let loss = sess.graph.sum_all(out)?;
    let forward_ms = start.elapsed().as_secs_f64() * 1e3;
    let forward_peak = memory::snapshot().peak.saturating_sub(base);
    let start = Instant::now();
    let grads = sess.graph.backward_leaves(loss)?;
    let backward_ms = start.elapsed().as_secs_f64() * 1e3;
    let train_peak = memory::snapshot().peak.saturating_sub(base);
    drop(grads);
    drop(sess);
    Ok(Sample {
        forward_peak,
        train_peak,
        forward_ms,
        backward_ms,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Profiles one forward and backward pass of `kind` on a single random
/// sequence of length `n`, in `f32`.
///
/// `measured_peak_elems` is the peak of working buffers (activations and
/// constants) that become live during the forward pass; `train_peak_elems`
/// extends it through the backward pass, gradients included. Parameters are
/// excluded from both. Times are medians over `opts.repeats` passes after a
/// warm-up.
pub fn profile_run(kind: ModelKind, n: usize, opts: &ProfileOptions) -> Result<ProfileRecord> {
    if opts.repeats < 1 {
        return Err(invalid("profiling needs at least one repeat"));
    }
    if n < 1 || opts.d_e < 1 || opts.d_h < 1 {
        return Err(invalid(format!("profiling needs n, d_e, d_h >= 1, got {n}, {}, {}", opts.d_e, opts.d_h)));
    }
    let r = match opts.r {
        Some(r) => r.clamp(1, n),
        None => select_block_length(n)?,
    };
    let mut init = stream(opts.seed, Stream::Init);
    let mut store = ParamStore::<f32>::new();
    let model = match kind {
        ModelKind::BiBlosa => Model::Blocked(BiBlosa::init(
            &mut store,
            "bench",
            opts.d_e,
            opts.d_h,
            DEFAULT_SCORE_SCALE,
            1.0,
            MaskKind::Forward,
            MaskKind::Backward,
            &mut init,
        )?),
        ModelKind::FullSan => Model::Full(FullSan::init(&mut store, "bench", opts.d_e, opts.d_h, DEFAULT_SCORE_SCALE, &mut init)?),
    };
    let x = uniform::<f32>(&[n, opts.d_e], -1.0, 1.0, &mut stream(opts.seed, Stream::Data))?;

    memory::set_limit(opts.limit.map(|l| l + memory::snapshot().live));
    let samples: Result<Vec<Sample>> = (0..=opts.repeats).map(|_| run_once(&model, &store, &x, r)).collect();
    memory::set_limit(None);
    let samples = samples?;
    let timed = &samples[1..];

    let cost = count_score_elements(n, r, opts.d_e);
    let (r, m) = match kind {
        ModelKind::BiBlosa => (r, cost.m),
        ModelKind::FullSan => (n, 1),
    };
    Ok(ProfileRecord {
        kind,
        n,
        r,
        m,
        analytic_elems: cost.elems(kind),
        measured_peak_elems: timed.iter().map(|s| s.forward_peak).max().unwrap_or(0),
        train_peak_elems: timed.iter().map(|s| s.train_peak).max(),
        forward_ms: median(timed.iter().map(|s| s.forward_ms).collect()),
        backward_ms: median(timed.iter().map(|s| s.backward_ms).collect()),
    })
}

/// Records of a length sweep with the fitted memory slope per kind.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub records: Vec<ProfileRecord>,
    /// Slope of `measured_peak_elems` per kind.
    pub slopes: BTreeMap<ModelKind, f64>,
    /// Slope of `train_peak_elems` per kind.
    pub train_slopes: BTreeMap<ModelKind, f64>,
}

impl ScalingReport {
    pub fn slope(&self, kind: ModelKind) -> Option<f64> {
        self.slopes.get(&kind).copied()
    }

    pub fn train_slope(&self, kind: ModelKind) -> Option<f64> {
        self.train_slopes.get(&kind).copied()
    }

    pub fn record(&self, kind: ModelKind, n: usize) -> Option<&ProfileRecord> {
        self.records.iter().find(|r| r.kind == kind && r.n == n)
    }
}

/// Profiles every kind at every length and fits log-log slopes of both peaks
/// against `n`.
pub fn scaling_experiment(lengths: &[usize], kinds: &[ModelKind], opts: &ProfileOptions) -> Result<ScalingReport> {
    if lengths.len() < 2 {
        return Err(invalid(format!("scaling sweep needs at least 2 lengths, got {}", lengths.len())));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("scaling sweep lengths must be strictly ascending"));
    }
    let mut records = Vec::new();
    let mut slopes = BTreeMap::new();
    let mut train_slopes = BTreeMap::new();
    for &kind in kinds {
        let (mut points, mut train_points) = (Vec::new(), Vec::new());
        for &n in lengths {
            let rec = profile_run(kind, n, opts)?;
            points.push((n as f64, rec.measured_peak_elems as f64));
            train_points.push((n as f64, rec.train_peak_elems.unwrap_or(0) as f64));
            records.push(rec);
        }
        slopes.insert(kind, fit_loglog_slope(&points)?);
        train_slopes.insert(kind, fit_loglog_slope(&train_points)?);
    }
    Ok(ScalingReport {
        records,
        slopes,
        train_slopes,
    })
}
