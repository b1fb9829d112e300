use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamKind, Session};
use crate::tensor::{Scalar, Tensor};

/// Mean negative log-likelihood of `labels` under `softmax(logits [M, K])`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err(
            "cross_entropy",
            format!("logits {shape:?} do not match {} labels", labels.len()),
        ));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    let onehot = Tensor::from_fn(&shape, |i| if labels[i / k] == i % k { T::one() } else { T::zero() });
    let onehot = g.constant(onehot);
    let logp = g.log_softmax_last(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum_all(picked)?;
    g.scalar_mul(total, -1.0 / labels.len() as f64)
}

/// Distribution over `K` ordinal classes whose expectation is `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub p: Vec<f64>,
}

impl TargetDistribution {
    pub fn expectation(&self) -> f64 {
        self.p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }
}

/// Splits `y` between classes `floor(y)` and `floor(y) + 1` (1-based).
pub fn map_target(y: f64, k: usize) -> Result<TargetDistribution> {
    if !(1.0..=k as f64).contains(&y) {
        return Err(invalid(format!("target {y} outside [1, {k}]")));
    }
    let mut p = vec![0.0; k];
    let fl = y.floor();
    let i = fl as usize;
    p[i - 1] = fl - y + 1.0;
    if i < k {
        p[i] = y - fl;
    }
    Ok(TargetDistribution { p })
}

/// `sum_k p_k (ln p_k - ln q_k)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err("kl", format!("{} vs {} classes", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > 0.0 {
            if qk <= 0.0 {
                return Err(invalid("predicted distribution has zero mass where the target has support"));
            }
            total += pk * (pk.ln() - qk.ln());
        }
    }
    Ok(total)
}

/// Batch-mean KL divergence of predictions `q [M, K]` from fixed targets
/// `p [M, K]`.
pub fn kl_loss<T: Scalar>(g: &mut Graph<T>, target: &Tensor<T>, q: NodeId) -> Result<NodeId> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || target.shape() != shape.as_slice() {
        return Err(shape_err("kl", format!("target {:?} vs prediction {shape:?}", target.shape())));
    }
    let qv = g.value(q);
    let mut entropy = 0.0;
    for (&p, &qk) in target.data().iter().zip(qv.data()) {
        let p = p.as_f64();
        if p > 0.0 {
            if qk.as_f64() <= 0.0 {
                return Err(invalid("predicted distribution has zero mass where the target has support"));
            }
            entropy += p * p.ln();
        }
    }
    // Zero-target entries may meet q = 0; mask them before the log.
    let safe = Tensor::from_fn(&shape, |i| if target.data()[i] > T::zero() { T::zero() } else { T::one() });
    let safe = g.constant(safe);
    let shifted = g.add(q, safe)?;
    let logq = g.log(shifted)?;
    let p = g.constant(target.clone());
    let cross = g.mul(p, logq)?;
    let cross = g.sum_all(cross)?;
    let kl = g.scalar_mul(cross, -1.0)?;
    let kl = g.scalar_add(kl, entropy)?;
    g.scalar_mul(kl, 1.0 / shape[0] as f64)
}

/// `loss + gamma * sum ||W||^2` over weight-kind parameters.
pub fn objective<T: Scalar>(sess: &mut Session<T>, loss: NodeId, gamma: f64) -> Result<NodeId> {
    if !(gamma >= 0.0) {
        return Err(invalid(format!("L2 coefficient must be non-negative, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(loss);
    }
    let weights: Vec<String> = sess
        .params()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(path, _)| path.to_string())
        .collect();
    let mut total = loss;
    let mut penalty = None;
    for path in weights {
        let w = sess.param(&path)?;
        let sq = sess.graph.mul(w, w)?;
        let s = sess.graph.sum_all(sq)?;
        penalty = Some(match penalty {
            None => s,
            Some(acc) => sess.graph.add(acc, s)?,
        });
    }
    if let Some(p) = penalty {
        let p = sess.graph.scalar_mul(p, gamma)?;
        total = sess.graph.add(total, p)?;
    }
    Ok(total)
}
