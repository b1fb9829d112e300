//! Compatibility functions and query-driven attention over a sequence.

use super::{Activation, AttnConfig};
use crate::autodiff::NodeId;
use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Scores every token of `x [.., n, d_e]` against a query `q [.., d_q]`.
pub trait Compat {
    /// `[.., n]` for vanilla scoring, `[.., n, d_e]` for multi-dimensional.
    fn scores<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId, q: NodeId) -> Result<NodeId>;

    fn is_multi_dim(&self) -> bool;
}

/// `w^T act(W1 x + W2 q + b1) + b`.
#[derive(Debug, Clone)]
pub struct AdditiveCompat {
    prefix: String,
    pub d_e: usize,
    pub d_q: usize,
    pub d_h: usize,
    pub activation: Activation,
    pub multi_dim: bool,
}

impl AdditiveCompat {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &AttnConfig,
        d_q: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let AttnConfig { d_e, d_h, activation, multi_dim, .. } = *cfg;
        let out = if multi_dim { d_e } else { 1 };
        store.add_weight(format!("{prefix}/w1"), d_e, d_h, rng)?;
        store.add_weight(format!("{prefix}/w2"), d_q, d_h, rng)?;
        store.add_bias(format!("{prefix}/b1"), d_h)?;
        store.add_weight(format!("{prefix}/w"), d_h, out, rng)?;
        store.add_bias(format!("{prefix}/b"), out)?;
        Ok(AdditiveCompat {
            prefix: prefix.to_string(),
            d_e,
            d_q,
            d_h,
            activation,
            multi_dim,
        })
    }
}

impl Compat for AdditiveCompat {
    fn scores<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId, q: NodeId) -> Result<NodeId> {
        let p = &self.prefix;
        let (w1, w2, b1) = (sess.param(&format!("{p}/w1"))?, sess.param(&format!("{p}/w2"))?, sess.param(&format!("{p}/b1"))?);
        let (w, b) = (sess.param(&format!("{p}/w"))?, sess.param(&format!("{p}/b"))?);
        let g = &mut sess.graph;
        let n = check_query(g.shape(x), g.shape(q), self.d_e, self.d_q)?;
        let hx = g.matmul(x, w1)?;
        let hq = project_query(g, q, w2, Some(b1))?;
        let r = g.rank(hq);
        let hq = g.expand(hq, r - 1, n)?;
        let h = g.add(hx, hq)?;
        let h = self.activation.apply(g, h)?;
        let s = g.linear(h, w, b)?;
        if self.multi_dim {
            Ok(s)
        } else {
            let shape = g.shape(s);
            let squeezed = shape[..shape.len() - 1].to_vec();
            g.reshape(s, &squeezed)
        }
    }

    fn is_multi_dim(&self) -> bool {
        self.multi_dim
    }
}

/// `(W1 x)^T (W2 q)`.
#[derive(Debug, Clone)]
pub struct MultiplicativeCompat {
    prefix: String,
    pub d_e: usize,
    pub d_q: usize,
    pub d_h: usize,
}

impl MultiplicativeCompat {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_e: usize,
        d_q: usize,
        d_h: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        store.add_weight(format!("{prefix}/w1"), d_e, d_h, rng)?;
        store.add_weight(format!("{prefix}/w2"), d_q, d_h, rng)?;
        Ok(MultiplicativeCompat {
            prefix: prefix.to_string(),
            d_e,
            d_q,
            d_h,
        })
    }
}

impl Compat for MultiplicativeCompat {
    fn scores<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId, q: NodeId) -> Result<NodeId> {
        let w1 = sess.param(&format!("{}/w1", self.prefix))?;
        let w2 = sess.param(&format!("{}/w2", self.prefix))?;
        let g = &mut sess.graph;
        let n = check_query(g.shape(x), g.shape(q), self.d_e, self.d_q)?;
        let hx = g.matmul(x, w1)?;
        let hq = project_query(g, q, w2, None)?;
        let r = g.rank(hq);
        let hq = g.expand(hq, r - 1, n)?;
        let prod = g.mul(hx, hq)?;
        let r = g.rank(prod);
        g.sum(prod, r - 1)
    }

    fn is_multi_dim(&self) -> bool {
        false
    }
}

fn check_query(x: &[usize], q: &[usize], d_e: usize, d_q: usize) -> Result<usize> {
    let r = x.len();
    if r < 2 || q.len() != r - 1 || x[..r - 2] != q[..r - 2] || x[r - 1] != d_e || q[r - 2] != d_q {
        return Err(shape_err(
            "attention",
            format!("sequence {x:?} and query {q:?} do not match d_e={d_e}, d_q={d_q}"),
        ));
    }
    Ok(x[r - 2])
}

fn project_query<T: Scalar>(
    g: &mut crate::autodiff::Graph<T>,
    q: NodeId,
    w: NodeId,
    b: Option<NodeId>,
) -> Result<NodeId> {
    let vector = g.rank(q) == 1;
    let q2 = if vector {
        let d = g.shape(q)[0];
        g.reshape(q, &[1, d])?
    } else {
        q
    };
    let h = match b {
        Some(b) => g.linear(q2, w, b)?,
        None => g.matmul(q2, w)?,
    };
    if vector {
        let d = g.shape(h)[1];
        g.reshape(h, &[d])
    } else {
        Ok(h)
    }
}

/// One weight per token: `s = sum_i p_i x_i` with `p = softmax(scores)`.
/// Returns `(s [.., d_e], p [.., n])`.
pub fn vanilla_attention<T: Scalar, C: Compat>(
    sess: &mut Session<T>,
    x: NodeId,
    q: NodeId,
    compat: &C,
) -> Result<(NodeId, NodeId)> {
    if compat.is_multi_dim() {
        return Err(invalid("vanilla attention needs a scalar compatibility function"));
    }
    let a = compat.scores(sess, x, q)?;
    let g = &mut sess.graph;
    let p = g.softmax_last(a)?;
    let r = g.rank(x);
    let d = g.shape(x)[r - 1];
    let pe = g.expand(p, r - 1, d)?;
    let weighted = g.mul(pe, x)?;
    Ok((g.sum(weighted, r - 2)?, p))
}

/// One weight per token and feature: softmax over tokens independently for
/// each feature. Returns `(s [.., d_e], P [.., n, d_e])`.
pub fn multi_dim_attention<T: Scalar, C: Compat>(
    sess: &mut Session<T>,
    x: NodeId,
    q: NodeId,
    compat: &C,
) -> Result<(NodeId, NodeId)> {
    if !compat.is_multi_dim() {
        return Err(invalid("multi-dimensional attention needs a vector compatibility function"));
    }
    let a = compat.scores(sess, x, q)?;
    let g = &mut sess.graph;
    let r = g.rank(x);
    let p = g.softmax(a, r - 2)?;
    let weighted = g.mul(p, x)?;
    Ok((g.sum(weighted, r - 2)?, p))
}
