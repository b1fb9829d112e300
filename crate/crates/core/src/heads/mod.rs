//! Task heads, losses and optimizers.

mod losses;
mod optim;
mod select;

pub use crate::init::{dropout, glorot_uniform};
pub use losses::{cross_entropy, kl_divergence, kl_loss, map_target, objective, TargetDistribution};
pub use optim::{Adadelta, Adam, Optimizer, OptimizerKind};
pub use select::SentenceSelect;

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// `[s1; s2; s1 - s2; s1 * s2]` over the last axis.
pub fn relation_rep<T: Scalar>(g: &mut Graph<T>, s1: NodeId, s2: NodeId) -> Result<NodeId> {
    same_shape(g, s1, s2)?;
    let diff = g.sub(s1, s2)?;
    let prod = g.mul(s1, s2)?;
    g.concat_last(&[s1, s2, diff, prod])
}

/// `[s1 * s2; |s1 - s2|]` over the last axis.
pub fn relatedness_rep<T: Scalar>(g: &mut Graph<T>, s1: NodeId, s2: NodeId) -> Result<NodeId> {
    same_shape(g, s1, s2)?;
    let prod = g.mul(s1, s2)?;
    let diff = g.sub(s1, s2)?;
    let pos = g.relu(diff)?;
    let neg = g.scalar_mul(diff, -1.0)?;
    let neg = g.relu(neg)?;
    let abs = g.add(pos, neg)?;
    g.concat_last(&[prod, abs])
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err(
            "relation",
            format!("encodings differ in shape: {:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Hidden relu layer followed by a linear output: `[.., d_in]` -> logits `[.., classes]`.
#[derive(Debug, Clone)]
pub struct Classifier {
    prefix: String,
    pub d_in: usize,
    pub d_hidden: usize,
    pub classes: usize,
}

impl Classifier {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        store.add_weight(format!("{prefix}/hidden/w"), d_in, d_hidden, rng)?;
        store.add_bias(format!("{prefix}/hidden/b"), d_hidden)?;
        store.add_weight(format!("{prefix}/out/w"), d_hidden, classes, rng)?;
        store.add_bias(format!("{prefix}/out/b"), classes)?;
        Ok(Classifier {
            prefix: prefix.to_string(),
            d_in,
            d_hidden,
            classes,
        })
    }

    pub fn logits<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId) -> Result<NodeId> {
        let p = &self.prefix;
        let w1 = sess.param(&format!("{p}/hidden/w"))?;
        let b1 = sess.param(&format!("{p}/hidden/b"))?;
        let w2 = sess.param(&format!("{p}/out/w"))?;
        let b2 = sess.param(&format!("{p}/out/b"))?;
        let g = &mut sess.graph;
        let x = as_matrix(g, x)?;
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h)?;
        g.linear(h, w2, b2)
    }
}

/// Promotes a single vector to a one-row matrix.
fn as_matrix<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    if g.rank(x) == 1 {
        let d = g.shape(x)[0];
        g.reshape(x, &[1, d])
    } else {
        Ok(x)
    }
}

/// Three-way relation classifier over a premise and hypothesis encoding.
#[derive(Debug, Clone)]
pub struct NliHead {
    pub classifier: Classifier,
}

impl NliHead {
    pub const CLASSES: usize = 3;

    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d_s: usize, d_hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(NliHead {
            classifier: Classifier::init(store, prefix, 4 * d_s, d_hidden, Self::CLASSES, rng)?,
        })
    }

    /// Logits `[B, 3]` for encodings `[B, d_s]` (or `[1, 3]` for vectors).
    pub fn logits<T: Scalar>(&self, sess: &mut Session<T>, s_p: NodeId, s_h: NodeId) -> Result<NodeId> {
        let rep = relation_rep(&mut sess.graph, s_p, s_h)?;
        self.classifier.logits(sess, rep)
    }

    pub fn probs<T: Scalar>(&self, sess: &mut Session<T>, s_p: NodeId, s_h: NodeId) -> Result<NodeId> {
        let logits = self.logits(sess, s_p, s_h)?;
        sess.graph.softmax_last(logits)
    }
}

/// Relatedness score on `[1, K]` as the expectation of a K-way distribution.
#[derive(Debug, Clone)]
pub struct RelatednessHead {
    pub classifier: Classifier,
    pub k: usize,
}

impl RelatednessHead {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_s: usize,
        d_hidden: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("relatedness needs at least 2 classes, got {k}")));
        }
        Ok(RelatednessHead {
            classifier: Classifier::init(store, prefix, 2 * d_s, d_hidden, k, rng)?,
            k,
        })
    }

    /// Distribution `[B, K]` and predicted score `[B]`.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, s1: NodeId, s2: NodeId) -> Result<(NodeId, NodeId)> {
        let rep = relatedness_rep(&mut sess.graph, s1, s2)?;
        let logits = self.classifier.logits(sess, rep)?;
        let p = sess.graph.softmax_last(logits)?;
        let y = expected_score(&mut sess.graph, p)?;
        Ok((p, y))
    }
}

/// `sum_k k * p_k` over the last axis of `p [.., K]`.
pub fn expected_score<T: Scalar>(g: &mut Graph<T>, p: NodeId) -> Result<NodeId> {
    let k = *g.shape(p).last().unwrap();
    let beta = g.constant(Tensor::from_fn(&[k], |i| T::from_f64((i + 1) as f64)));
    let weighted = g.mul(p, beta)?;
    let r = g.rank(weighted);
    g.sum(weighted, r - 1)
}
