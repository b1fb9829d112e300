//! Self-attention variants: token-to-sequence summary, token-pair and
//! direction-masked token-pair attention.

use super::{attend, check_scale, pair_bias, pairwise_sum, Activation, Mask, Validity};
use crate::autodiff::NodeId;
use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Scalar;

fn check_validity(x: &[usize], validity: Option<&Validity>) -> Result<()> {
    if let Some(v) = validity {
        if v.shape() != &x[..x.len() - 1] {
            return Err(shape_err(
                "attention",
                format!("validity {:?} does not cover sequence {x:?}", v.shape()),
            ));
        }
    }
    Ok(())
}

fn param4<T: Scalar>(sess: &mut Session<T>, p: &str, names: [&str; 4]) -> Result<[NodeId; 4]> {
    Ok([
        sess.param(&format!("{p}/{}", names[0]))?,
        sess.param(&format!("{p}/{}", names[1]))?,
        sess.param(&format!("{p}/{}", names[2]))?,
        sess.param(&format!("{p}/{}", names[3]))?,
    ])
}

/// Compresses `[.., n, d]` into `[.., d]` with feature-wise weights
/// `W act(W1 x_i + b1) + b`.
#[derive(Debug, Clone)]
pub struct Source2Token {
    prefix: String,
    pub d: usize,
    pub activation: Activation,
}

impl Source2Token {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        store.add_weight(format!("{prefix}/w1"), d, d, rng)?;
        store.add_bias(format!("{prefix}/b1"), d)?;
        store.add_weight(format!("{prefix}/w"), d, d, rng)?;
        store.add_bias(format!("{prefix}/b"), d)?;
        Ok(Self::bind(prefix, d))
    }

    /// Handle to parameters already present in a store.
    pub fn bind(prefix: &str, d: usize) -> Self {
        Source2Token {
            prefix: prefix.to_string(),
            d,
            activation: Activation::Relu,
        }
    }

    /// Fails if some sequence has no valid token.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: NodeId, validity: Option<&Validity>) -> Result<NodeId> {
        if validity.is_some_and(Validity::has_empty_row) {
            return Err(invalid("source2token needs at least one valid token per sequence"));
        }
        Ok(self.forward_with_probs(sess, x, validity)?.0)
    }

    /// Output `[.., d]` and probabilities `[.., n, d]`. Sequences without
    /// valid tokens summarize to zero.
    pub fn forward_with_probs<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: NodeId,
        validity: Option<&Validity>,
    ) -> Result<(NodeId, NodeId)> {
        let [w1, b1, w, b] = param4(sess, &self.prefix, ["w1", "b1", "w", "b"])?;
        check_validity(sess.graph.shape(x), validity)?;
        let bias = match validity {
            Some(v) if !v.all() => Some(sess.constant(v.additive()?)),
            _ => None,
        };
        let g = &mut sess.graph;
        let h = g.linear(x, w1, b1)?;
        let h = self.activation.apply(g, h)?;
        let mut scores = g.linear(h, w, b)?;
        let r = g.rank(x);
        if let Some(bias) = bias {
            let bias = g.expand(bias, r - 1, self.d)?;
            scores = g.add(scores, bias)?;
        }
        let p = g.softmax(scores, r - 2)?;
        let weighted = g.mul(p, x)?;
        Ok((g.sum(weighted, r - 2)?, p))
    }
}

/// Feature-wise attention between every token pair:
/// `W act(W1 x_i + W2 x_j + b1) + b`.
#[derive(Debug, Clone)]
pub struct Token2Token {
    prefix: String,
    pub d: usize,
    pub activation: Activation,
}

impl Token2Token {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        store.add_weight(format!("{prefix}/w1"), d, d, rng)?;
        store.add_weight(format!("{prefix}/w2"), d, d, rng)?;
        store.add_bias(format!("{prefix}/b1"), d)?;
        store.add_weight(format!("{prefix}/w"), d, d, rng)?;
        store.add_bias(format!("{prefix}/b"), d)?;
        Ok(Token2Token {
            prefix: prefix.to_string(),
            d,
            activation: Activation::Relu,
        })
    }

    /// Output `[.., n, d]` and probabilities `[.., nq, nk, d]`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: NodeId,
        mask: Option<&Mask>,
        validity: Option<&Validity>,
    ) -> Result<(NodeId, NodeId)> {
        let [w1, w2, b1, w] = param4(sess, &self.prefix, ["w1", "w2", "b1", "w"])?;
        let b = sess.param(&format!("{}/b", self.prefix))?;
        let bias = bias_node(sess, x, mask, validity)?;
        let g = &mut sess.graph;
        let keys = g.matmul(x, w1)?;
        let queries = g.linear(x, w2, b1)?;
        let h = pairwise_sum(g, keys, queries)?;
        let h = self.activation.apply(g, h)?;
        let scores = g.linear(h, w, b)?;
        attend(g, scores, bias, x)
    }
}

fn bias_node<T: Scalar>(
    sess: &mut Session<T>,
    x: NodeId,
    mask: Option<&Mask>,
    validity: Option<&Validity>,
) -> Result<Option<NodeId>> {
    let shape = sess.graph.shape(x).to_vec();
    check_validity(&shape, validity)?;
    let owned;
    let keys = match validity {
        Some(v) => v,
        None => {
            owned = Validity::all_valid(&shape[..shape.len() - 1]);
            &owned
        }
    };
    Ok(pair_bias(mask, keys)?.map(|t| sess.constant(t)))
}

/// Nodes produced by [`MaskedSelfAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct MaskedOutput {
    /// `[.., n, d]`
    pub output: NodeId,
    /// Bounded scores before masking, `[.., nq, nk, d]`.
    pub scores: NodeId,
    /// `[.., nq, nk, d]`, normalized over keys.
    pub probs: NodeId,
}

/// Direction-masked token-pair attention with bounded scores
/// `c * tanh((W1 x_i + W2 x_j + b1) / c) + M_ij`.
#[derive(Debug, Clone)]
pub struct MaskedSelfAttention {
    prefix: String,
    pub d: usize,
    pub c: f64,
}

impl MaskedSelfAttention {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        c: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_scale(c)?;
        store.add_weight(format!("{prefix}/w1"), d, d, rng)?;
        store.add_weight(format!("{prefix}/w2"), d, d, rng)?;
        store.add_bias(format!("{prefix}/b1"), d)?;
        Ok(Self::bind(prefix, d, c))
    }

    /// Handle to parameters already present in a store.
    pub fn bind(prefix: &str, d: usize, c: f64) -> Self {
        MaskedSelfAttention {
            prefix: prefix.to_string(),
            d,
            c,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: NodeId,
        mask: &Mask,
        validity: Option<&Validity>,
    ) -> Result<MaskedOutput> {
        let w1 = sess.param(&format!("{}/w1", self.prefix))?;
        let w2 = sess.param(&format!("{}/w2", self.prefix))?;
        let b1 = sess.param(&format!("{}/b1", self.prefix))?;
        let bias = bias_node(sess, x, Some(mask), validity)?;
        let g = &mut sess.graph;
        let keys = g.matmul(x, w1)?;
        let queries = g.linear(x, w2, b1)?;
        let h = pairwise_sum(g, keys, queries)?;
        let h = g.scalar_mul(h, 1.0 / self.c)?;
        let h = g.tanh(h)?;
        let scores = g.scalar_mul(h, self.c)?;
        let (output, probs) = attend(g, scores, bias, x)?;
        Ok(MaskedOutput { output, scores, probs })
    }
}
