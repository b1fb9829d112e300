//! Attention mechanisms over token-major sequences `[.., n, d]`.
//!
//! Score tensors for token-pair attention are laid out `[.., nq, nk, d]`
//! (query, key, feature) and normalized over the key axis.

mod compat;
mod mask;
mod self_attn;

pub use compat::{multi_dim_attention, vanilla_attention, AdditiveCompat, Compat, MultiplicativeCompat};
pub use mask::{build_mask, pair_bias, Mask, MaskKind, Validity};
pub use self_attn::{MaskedOutput, MaskedSelfAttention, Source2Token, Token2Token};

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Elu => g.elu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "elu" => Ok(Activation::Elu),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Scale of the bounded score `c * tanh(x / c)`.
pub const DEFAULT_SCORE_SCALE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnConfig {
    pub d_e: usize,
    pub d_h: usize,
    /// Masked attention scores are bounded to `[-c, c]`.
    pub c: f64,
    pub activation: Activation,
    pub multi_dim: bool,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            d_e: 32,
            d_h: 32,
            c: DEFAULT_SCORE_SCALE,
            activation: Activation::Relu,
            multi_dim: true,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_h == 0 {
            return Err(invalid(format!("attention dims must be positive, got d_e={} d_h={}", self.d_e, self.d_h)));
        }
        check_scale(self.c)
    }
}

pub(crate) fn check_scale(c: f64) -> Result<()> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("score scale must be positive, got {c}")))
    }
}

/// Sum of keys' projections and queries' projections over every pair:
/// `keys [.., nk, h]`, `queries [.., nq, h]` -> `[.., nq, nk, h]`.
pub(crate) fn pairwise_sum<T: Scalar>(g: &mut Graph<T>, keys: NodeId, queries: NodeId) -> Result<NodeId> {
    let r = g.rank(keys);
    let nk = g.shape(keys)[r - 2];
    let nq = g.shape(queries)[r - 2];
    let k = g.expand(keys, r - 2, nq)?;
    let q = g.expand(queries, r - 1, nk)?;
    g.add(k, q)
}

/// Feature-wise attention of queries over keys.
///
/// `scores [.., nq, nk, d]`, optional `bias [.., nq, nk]`, `values [.., nk, d]`.
/// Returns the attention output `[.., nq, d]` and the probabilities.
pub(crate) fn attend<T: Scalar>(
    g: &mut Graph<T>,
    scores: NodeId,
    bias: Option<NodeId>,
    values: NodeId,
) -> Result<(NodeId, NodeId)> {
    let r = g.rank(scores);
    let d = g.shape(scores)[r - 1];
    let nq = g.shape(scores)[r - 3];
    let logits = match bias {
        Some(b) => {
            let b = g.expand(b, r - 1, d)?;
            g.add(scores, b)?
        }
        None => scores,
    };
    let probs = g.softmax(logits, r - 2)?;
    let v = g.expand(values, r - 3, nq)?;
    let weighted = g.mul(probs, v)?;
    Ok((g.sum(weighted, r - 2)?, probs))
}
