//! Central finite-difference gradient checks (float64 only).

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId, OpKind};
use crate::init::uniform;
use crate::rng::{stream, Stream};
use crate::error::{invalid, Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

/// Worst coordinate of a finite-difference comparison, plus every
/// `(analytic, numeric)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Loss at the unperturbed point.
    pub loss: f64,
    pub step: f64,
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    fn empty(loss: f64, step: f64) -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            loss,
            step,
            pairs: Vec::new(),
        }
    }

    /// Rounding noise of a central difference: a few ulps at the loss scale
    /// (at least unit scale, since intermediates can exceed the loss)
    /// divided by `2 * step`.
    pub fn noise_floor(&self) -> f64 {
        8.0 * f64::EPSILON * self.loss.abs().max(1.0) / (2.0 * self.step)
    }

    /// Coordinates whose relative error reaches `rel_tol` while their
    /// absolute error also exceeds [`Self::noise_floor`].
    pub fn violations(&self, rel_tol: f64) -> usize {
        let floor = self.noise_floor();
        self.pairs
            .iter()
            .filter(|&&(a, n)| relative_error(a, n) >= rel_tol && (a - n).abs() > floor)
            .count()
    }

    fn observe(&mut self, index: usize, analytic: f64, numeric: f64) {
        self.pairs.push((analytic, numeric));
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }

    /// Combines reports; the worst coordinate wins.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let checked = self.checked + other.checked;
        let (mut best, rest) = if other.max_rel_error > self.max_rel_error { (other, self) } else { (self, other) };
        best.checked = checked;
        best.loss = best.loss.abs().max(rest.loss.abs());
        best.pairs.extend(rest.pairs);
        best
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value(g: &Graph<f64>, loss: NodeId) -> Result<f64> {
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of `f` at `theta` with central
/// differences `(f(θ + h e) - f(θ - h e)) / 2h` over every coordinate.
///
/// `f` receives a fresh graph and the node holding θ, and returns the scalar
/// loss node.
pub fn finite_difference_check<F>(f: F, theta: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let loss = f(&mut g, x)?;
        scalar_value(&g, loss)
    };

    let mut g = Graph::new();
    let x = g.input(theta.clone());
    let loss = f(&mut g, x)?;
    let first = scalar_value(&g, loss)?;
    let second = eval(theta)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = g.backward(loss)?.get_or_zeros(x, theta.shape());

    let mut report = GradCheckReport::empty(first, step);
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.observe(i, analytic.data()[i], (plus - minus) / (2.0 * step));
    }
    Ok(report)
}

/// Finite-difference check of every parameter in `store` for a loss built
/// by `build` inside an inference session (dropout off).
pub fn check_params<F>(store: &ParamStore<f64>, build: F, step: f64) -> Result<BTreeMap<String, GradCheckReport>>
where
    F: Fn(&mut Session<f64>) -> Result<NodeId>,
{
    check_params_filtered(store, build, step, |_| true)
}

pub fn check_params_filtered<F, P>(
    store: &ParamStore<f64>,
    build: F,
    step: f64,
    include: P,
) -> Result<BTreeMap<String, GradCheckReport>>
where
    F: Fn(&mut Session<f64>) -> Result<NodeId>,
    P: Fn(&str) -> bool,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut sess = Session::new(s);
        let loss = build(&mut sess)?;
        scalar_value(&sess.graph, loss)
    };

    let mut sess = Session::new(store);
    let loss = build(&mut sess)?;
    let first = scalar_value(&sess.graph, loss)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = sess.graph.backward(loss)?;
    let analytic = sess.param_grads(&grads);

    let mut probe = store.clone();
    let mut out = BTreeMap::new();
    for (path, param) in store.iter() {
        if !include(path) {
            continue;
        }
        let zeros = Tensor::zeros(param.value.shape());
        let a = analytic.get(path).unwrap_or(&zeros);
        let mut report = GradCheckReport::empty(first, step);
        for i in 0..param.value.len() {
            let orig = param.value.data()[i];
            probe.get_mut(path)?.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(path)?.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(path)?.data_mut()[i] = orig;
            report.observe(i, a.data()[i], (plus - minus) / (2.0 * step));
        }
        out.insert(path.to_string(), report);
    }
    Ok(out)
}

/// Worst report across parameters.
pub fn worst(reports: &BTreeMap<String, GradCheckReport>) -> Option<(&str, GradCheckReport)> {
    reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(k, v)| (k.as_str(), v.clone()))
}

/// Every op kind with representative input shapes, including broadcast
/// and batched variants.
pub fn op_cases() -> Vec<(OpKind, Vec<Vec<usize>>)> {
    use OpKind::*;
    vec![
        (MatMul, vec![vec![2, 3, 4], vec![4, 2]]),
        (MatMul, vec![vec![2, 3, 4], vec![2, 4, 2]]),
        (Linear, vec![vec![2, 3, 4], vec![4, 2], vec![2]]),
        (Add, vec![vec![2, 3], vec![2, 3]]),
        (Add, vec![vec![2, 3], vec![3]]),
        (Mul, vec![vec![2, 3], vec![2, 3]]),
        (Mul, vec![vec![2, 3], vec![3]]),
        (Gate, vec![vec![2, 3], vec![2, 3], vec![2, 3]]),
        (Concat { axis: 1 }, vec![vec![2, 3], vec![2, 2]]),
        (Slice { axis: 1, start: 1, len: 2 }, vec![vec![2, 4]]),
        (Tanh, vec![vec![2, 3]]),
        (Sigmoid, vec![vec![2, 3]]),
        (Relu, vec![vec![2, 3]]),
        (Elu, vec![vec![2, 3]]),
        (Exp, vec![vec![2, 3]]),
        (Log, vec![vec![2, 3]]),
        (Softmax { axis: 0 }, vec![vec![3, 2]]),
        (Softmax { axis: 1 }, vec![vec![2, 4]]),
        (LogSoftmax { axis: 1 }, vec![vec![2, 4]]),
        (Sum { axis: 1 }, vec![vec![2, 3, 2]]),
        (Max { axis: 0 }, vec![vec![3, 2]]),
        (ScalarMul(1.7), vec![vec![2, 3]]),
        (ScalarAdd(-0.3), vec![vec![2, 3]]),
        (Transpose { a: 0, b: 2 }, vec![vec![2, 3, 2]]),
        (
            Embedding {
                ids: vec![1, 4, 1, 0],
                shape: vec![2, 2],
            },
            vec![vec![5, 3]],
        ),
        (Reshape { shape: vec![3, 2] }, vec![vec![2, 3]]),
        (Expand { axis: 1, count: 3 }, vec![vec![2, 2]]),
    ]
}

/// Checks `sum(w * op(inputs))` with respect to each input in turn at one
/// random point drawn from `seed`.
pub fn check_op(kind: &OpKind, shapes: &[Vec<usize>], seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut rng = stream(seed, Stream::Other(7));
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| match kind {
            OpKind::Log => uniform(s, 0.5, 2.0, &mut rng),
            _ => uniform(s, -1.0, 1.0, &mut rng),
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = super::ops::forward(kind, &refs)?;
    let w = uniform(out.shape(), -1.0, 1.0, &mut rng)?;
    let mut report: Option<GradCheckReport> = None;
    for which in 0..inputs.len() {
        let r = finite_difference_check(
            |g, x| {
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { g.constant(t.clone()) })
                    .collect();
                let y = g.apply(kind.clone(), &ids)?;
                let wc = g.constant(w.clone());
                let p = g.mul(y, wc)?;
                g.sum_all(p)
            },
            &inputs[which],
            step,
        )?;
        report = Some(match report {
            None => r,
            Some(acc) => acc.merge(r),
        });
    }
    report.ok_or_else(|| invalid("op case has no inputs"))
}

/// Worst report per op case over `points` random points.
pub fn check_all_ops(points: usize, step: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (case, (kind, shapes)) in op_cases().iter().enumerate() {
        let mut worst: Option<GradCheckReport> = None;
        for p in 0..points {
            let r = check_op(kind, shapes, (case * 1000 + p) as u64, step)?;
            worst = Some(match worst {
                None => r,
                Some(acc) => acc.merge(r),
            });
        }
        let label = format!("{kind:?}").to_lowercase();
        out.push((label, worst.ok_or_else(|| invalid("no points checked"))?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn tanh_sum_at_zero() {
        let theta = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = finite_difference_check(
            |g, x| {
                let t = g.tanh(x)?;
                g.sum_all(t)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic, 1.0);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn cross_entropy_at_uniform_logits() {
        let theta = Tensor::zeros(&[4]);
        let r = finite_difference_check(
            |g, x| {
                let lp = g.log_softmax_last(x)?;
                let pick = g.slice(lp, 0, 2, 1)?;
                let s = g.sum_all(pick)?;
                g.scalar_mul(s, -1.0)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let theta = Tensor::zeros(&[2]);
        let err = finite_difference_check(
            |g, x| {
                calls.set(calls.get() + 1);
                let s = g.sum_all(x)?;
                g.scalar_add(s, calls.get() as f64)
            },
            &theta,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn step_must_be_positive() {
        let theta = Tensor::zeros(&[1]);
        assert!(finite_difference_check(|g, x| g.sum_all(x), &theta, 0.0).is_err());
    }
}
