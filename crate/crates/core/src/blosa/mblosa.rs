//! Masked block self-attention and the bi-directional context-fusion layer.

use super::plan::BlockPlan;
use crate::attention::{build_mask, MaskKind, MaskedSelfAttention, Source2Token, Validity};
use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// `[.., n, d]` -> zero-padded `[.., m, r, d]`.
pub fn partition_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, plan: &BlockPlan) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 || shape[rank - 2] != plan.n {
        return Err(shape_err("partition", format!("input {shape:?} does not have n={}", plan.n)));
    }
    let padded = if plan.pad > 0 {
        let mut pad_shape = shape.clone();
        pad_shape[rank - 2] = plan.pad;
        let zeros = g.constant(Tensor::try_zeros(&pad_shape)?);
        g.concat(&[x, zeros], rank - 2)?
    } else {
        x
    };
    let mut blocks = shape[..rank - 2].to_vec();
    blocks.extend([plan.m, plan.r, shape[rank - 1]]);
    g.reshape(padded, &blocks)
}

/// `[.., m, r, d]` -> `[.., n, d]`, dropping pads.
pub fn departition_node<T: Scalar>(g: &mut Graph<T>, blocks: NodeId, plan: &BlockPlan) -> Result<NodeId> {
    let shape = g.shape(blocks).to_vec();
    let rank = shape.len();
    let mut flat = shape[..rank - 3].to_vec();
    flat.extend([plan.padded_len(), shape[rank - 1]]);
    let flat = g.reshape(blocks, &flat)?;
    if plan.pad == 0 {
        Ok(flat)
    } else {
        g.slice(flat, rank - 3, 0, plan.n)
    }
}

/// Block summaries are valid when their block holds at least one valid token.
fn block_validity(tokens: &Validity) -> Result<Validity> {
    let shape = tokens.shape();
    let r = shape[shape.len() - 1];
    let flags = tokens.flags().chunks(r).map(|b| b.iter().any(|&f| f)).collect();
    Validity::new(&shape[..shape.len() - 1], flags)
}

/// One direction of masked block self-attention. Parameters live under
/// `{prefix}/intra`, `{prefix}/s2t`, `{prefix}/inter`, `{prefix}/gate` and
/// `{prefix}/fusion`.
#[derive(Debug, Clone)]
pub struct MBlosa {
    prefix: String,
    pub d: usize,
    pub kind: MaskKind,
    intra: MaskedSelfAttention,
    summary: Source2Token,
    inter: MaskedSelfAttention,
}

impl MBlosa {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        kind: MaskKind,
        c: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let intra = MaskedSelfAttention::init(store, &format!("{prefix}/intra"), d, c, rng)?;
        let summary = Source2Token::init(store, &format!("{prefix}/s2t"), d, rng)?;
        let inter = MaskedSelfAttention::init(store, &format!("{prefix}/inter"), d, c, rng)?;
        store.add_weight(format!("{prefix}/gate/w1"), d, d, rng)?;
        store.add_weight(format!("{prefix}/gate/w2"), d, d, rng)?;
        store.add_bias(format!("{prefix}/gate/b"), d)?;
        store.add_weight(format!("{prefix}/fusion/w1"), 3 * d, d, rng)?;
        store.add_bias(format!("{prefix}/fusion/b1"), d)?;
        store.add_weight(format!("{prefix}/fusion/w2"), 3 * d, d, rng)?;
        store.add_bias(format!("{prefix}/fusion/b2"), d)?;
        Ok(MBlosa {
            prefix: prefix.to_string(),
            d,
            kind,
            intra,
            summary,
            inter,
        })
    }

    fn p(&self, name: &str) -> String {
        format!("{}/{name}", self.prefix)
    }

    /// Masked self-attention inside every block with shared parameters.
    /// `blocks [.., m, r, d]`, `tokens [.., m, r]` -> `h [.., m, r, d]`.
    pub fn intra_block<T: Scalar>(&self, sess: &mut Session<T>, blocks: NodeId, tokens: &Validity) -> Result<NodeId> {
        let r = tokens.len();
        let mask = build_mask(r, self.kind)?;
        Ok(self.intra.forward(sess, blocks, &mask, Some(tokens))?.output)
    }

    /// Summarizes each block, attends across blocks and gates the result.
    /// `h [.., m, r, d]` -> `e [.., m, d]`.
    pub fn inter_block<T: Scalar>(&self, sess: &mut Session<T>, h: NodeId, tokens: &Validity) -> Result<NodeId> {
        let (v, _) = self.summary.forward_with_probs(sess, h, Some(tokens))?;
        let blocks = block_validity(tokens)?;
        let mask = build_mask(blocks.len(), self.kind)?;
        let o = self.inter.forward(sess, v, &mask, Some(&blocks))?.output;
        let w1 = sess.param(&self.p("gate/w1"))?;
        let w2 = sess.param(&self.p("gate/w2"))?;
        let b = sess.param(&self.p("gate/b"))?;
        let g = &mut sess.graph;
        let a = g.matmul(o, w1)?;
        let z = g.linear(v, w2, b)?;
        let z = g.add(a, z)?;
        let gate = g.sigmoid(z)?;
        g.gate(gate, o, v)
    }

    /// Gated merge of the input with intra-block context and duplicated
    /// block context. `x, h [.., n, d]`, `e [.., m, d]` -> `u [.., n, d]`.
    pub fn context_fusion<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: NodeId,
        h: NodeId,
        e: NodeId,
        plan: &BlockPlan,
    ) -> Result<NodeId> {
        let w1 = sess.param(&self.p("fusion/w1"))?;
        let b1 = sess.param(&self.p("fusion/b1"))?;
        let w2 = sess.param(&self.p("fusion/w2"))?;
        let b2 = sess.param(&self.p("fusion/b2"))?;
        let g = &mut sess.graph;
        let (xs, hs, es) = (g.shape(x).to_vec(), g.shape(h).to_vec(), g.shape(e).to_vec());
        let rank = xs.len();
        if hs != xs || es.len() != rank || es[..rank - 2] != xs[..rank - 2] || es[rank - 2] != plan.m || es[rank - 1] != xs[rank - 1] {
            return Err(shape_err(
                "context_fusion",
                format!("x {xs:?}, h {hs:?} and e {es:?} disagree with m={}", plan.m),
            ));
        }
        let dup = g.expand(e, rank - 1, plan.r)?;
        let big = departition_node(g, dup, plan)?;
        let cat = g.concat_last(&[x, h, big])?;
        let f = g.linear(cat, w1, b1)?;
        let f = g.relu(f)?;
        let z = g.linear(cat, w2, b2)?;
        let gate = g.sigmoid(z)?;
        g.gate(gate, f, x)
    }

    /// `x [.., n, d]` -> `u [.., n, d]`; `tokens [.., n]` marks real tokens.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: NodeId,
        r: usize,
        tokens: Option<&Validity>,
    ) -> Result<NodeId> {
        let shape = sess.graph.shape(x).to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 1] != self.d {
            return Err(shape_err("mblosa", format!("expected [.., n, {}], got {shape:?}", self.d)));
        }
        let plan = BlockPlan::new(shape[rank - 2], r)?;
        let validity = plan.token_validity(&shape[..rank - 2], tokens)?;
        let blocks = partition_node(&mut sess.graph, x, &plan)?;
        let h_blocks = self.intra_block(sess, blocks, &validity)?;
        let e = self.inter_block(sess, h_blocks, &validity)?;
        let h = departition_node(&mut sess.graph, h_blocks, &plan)?;
        self.context_fusion(sess, x, h, e, &plan)
    }
}

/// Bi-directional context fusion: untied FC projections feeding a forward
/// and a backward [`MBlosa`], concatenated to `[.., n, 2 d_h]`.
#[derive(Debug, Clone)]
pub struct BiBlosa {
    prefix: String,
    pub d_e: usize,
    pub d_h: usize,
    pub keep_prob: f64,
    pub fw: MBlosa,
    pub bw: MBlosa,
}

impl BiBlosa {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_e: usize,
        d_h: usize,
        c: f64,
        keep_prob: f64,
        fw_kind: MaskKind,
        bw_kind: MaskKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        for dir in ["fw", "bw"] {
            store.add_weight(format!("{prefix}/{dir}/fc/w"), d_e, d_h, rng)?;
            store.add_bias(format!("{prefix}/{dir}/fc/b"), d_h)?;
        }
        let fw = MBlosa::init(store, &format!("{prefix}/fw"), d_h, fw_kind, c, rng)?;
        let bw = MBlosa::init(store, &format!("{prefix}/bw"), d_h, bw_kind, c, rng)?;
        Ok(BiBlosa {
            prefix: prefix.to_string(),
            d_e,
            d_h,
            keep_prob,
            fw,
            bw,
        })
    }

    fn branch<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        dir: &str,
        module: &MBlosa,
        x: NodeId,
        r: usize,
        tokens: Option<&Validity>,
    ) -> Result<NodeId> {
        let w = sess.param(&format!("{}/{dir}/fc/w", self.prefix))?;
        let b = sess.param(&format!("{}/{dir}/fc/b", self.prefix))?;
        let x = sess.dropout(x, self.keep_prob)?;
        let p = sess.graph.linear(x, w, b)?;
        let p = sess.graph.relu(p)?;
        module.forward(sess, p, r, tokens)
    }

    /// `x [.., n, d_e]` -> `u_bi [.., n, 2 d_h]`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: NodeId,
        r: usize,
        tokens: Option<&Validity>,
    ) -> Result<NodeId> {
        let u_fw = self.branch(sess, "fw", &self.fw, x, r, tokens)?;
        let u_bw = self.branch(sess, "bw", &self.bw, x, r, tokens)?;
        sess.graph.concat_last(&[u_fw, u_bw])
    }
}
