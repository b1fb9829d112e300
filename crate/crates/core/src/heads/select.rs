use super::relation_rep;
use crate::attention::MaskKind;
use crate::autodiff::NodeId;
use crate::blosa::{select_block_length, BiBlosa};
use crate::error::{shape_err, Result};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Picks the sentence that answers a question: each sentence is paired with
/// the question, fused with its neighbours by a Bi-BloSA layer, scored and
/// normalized over sentences.
#[derive(Debug, Clone)]
pub struct SentenceSelect {
    prefix: String,
    pub d: usize,
    pub fusion: BiBlosa,
}

impl SentenceSelect {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, d_h: usize, c: f64, rng: &mut Rng) -> Result<Self> {
        let fusion = BiBlosa::init(
            store,
            &format!("{prefix}/fusion"),
            4 * d,
            d_h,
            c,
            1.0,
            MaskKind::Forward,
            MaskKind::Backward,
            rng,
        )?;
        store.add_weight(format!("{prefix}/score/w"), 2 * d_h, 1, rng)?;
        store.add_bias(format!("{prefix}/score/b"), 1)?;
        Ok(SentenceSelect {
            prefix: prefix.to_string(),
            d,
            fusion,
        })
    }

    /// `sentences [m, d]`, `question [d]` -> (logits `[m]`, probabilities `[m]`).
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, sentences: NodeId, question: NodeId) -> Result<(NodeId, NodeId)> {
        let (us, qs) = (sess.graph.shape(sentences).to_vec(), sess.graph.shape(question).to_vec());
        if us.len() != 2 || qs != [self.d] || us[1] != self.d {
            return Err(shape_err(
                "sentence_select",
                format!("sentences {us:?} and question {qs:?} must share length {}", self.d),
            ));
        }
        let m = us[0];
        let w = sess.param(&format!("{}/score/w", self.prefix))?;
        let b = sess.param(&format!("{}/score/b", self.prefix))?;
        let q = sess.graph.expand(question, 0, m)?;
        let pairs = relation_rep(&mut sess.graph, sentences, q)?;
        let fused = self.fusion.forward(sess, pairs, select_block_length(m)?, None)?;
        let g = &mut sess.graph;
        let scores = g.linear(fused, w, b)?;
        let logits = g.reshape(scores, &[m])?;
        let probs = g.softmax_last(logits)?;
        Ok((logits, probs))
    }
}
