//! Bi-directional block self-attention (Bi-BloSA) sequence encoding, built on
//! a small eager autodiff engine.
//!
//! Sequences are stored token-major: a sequence of `n` tokens with `d`
//! features is a `[n, d]` tensor (one row per token), optionally with leading
//! batch axes. Weight matrices are `[in, out]` and applied as `x · W`.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blosa;
pub mod error;
pub mod heads;
pub mod init;
pub mod params;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Graph, NodeId, OpKind};
pub use error::{Error, Result};
pub use params::{ParamKind, ParamStore, Session};
pub use tensor::{DType, Scalar, Tensor};
