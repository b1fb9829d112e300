//! Named parameter storage and graph sessions.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::init::{check_keep_prob, dropout_mask, glorot_uniform};
use crate::rng::Rng;
use crate::tensor::{MemClass, Scalar, Tensor};

/// Role of a parameter. Only weight matrices are L2-penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Embedding => "embedding",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(ParamKind::Weight),
            "bias" => Ok(ParamKind::Bias),
            "embedding" => Ok(ParamKind::Embedding),
            other => Err(Error::Format(format!("unknown parameter kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Learnable tensors keyed by unique slash-separated paths
/// (e.g. `fw/intra/w1`). Iteration order is the sorted path order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f64> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        let value = value.into_class(MemClass::Parameter);
        self.params.insert(path, Param { value, kind });
        Ok(())
    }

    /// Glorot-initialized `[fan_in, fan_out]` weight.
    pub fn add_weight(&mut self, path: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
        self.insert(path, glorot_uniform(fan_in, fan_out, rng)?, ParamKind::Weight)
    }

    /// Zero-initialized bias.
    pub fn add_bias(&mut self, path: impl Into<String>, len: usize) -> Result<()> {
        self.insert(path, Tensor::try_zeros(&[len])?, ParamKind::Bias)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn param(&self, path: &str) -> Option<&Param<T>> {
        self.params.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// Replaces the value of an existing parameter with one of equal shape.
    pub fn set(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "param",
                format!("`{path}` has shape {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value.into_class(MemClass::Parameter);
        Ok(())
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sets every parameter whose path starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (path, p) in self.params.iter_mut() {
            if path.starts_with(prefix) {
                p.value = Tensor::zeros(p.value.shape()).into_class(MemClass::Parameter);
            }
        }
    }
}

/// A graph under construction bound to a parameter store.
///
/// Parameters enter the graph as differentiable leaves the first time they
/// are requested; the leaf shares storage with the store. Dropout is active
/// only in sessions created with [`Session::training`].
pub struct Session<'p, T: Scalar = f64> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
    dropout_rng: Option<&'p mut Rng>,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// Inference session: dropout is the identity.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            dropout_rng: None,
        }
    }

    pub fn training(params: &'p ParamStore<T>, dropout_rng: &'p mut Rng) -> Self {
        Session {
            dropout_rng: Some(dropout_rng),
            ..Session::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(path) {
            return Ok(id);
        }
        let value = self.params.get(path)?.clone();
        let id = self.graph.input(value);
        self.bound.insert(path.to_string(), id);
        Ok(id)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.graph.input(value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.graph.constant(value)
    }

    /// Inverted dropout on `x`.
    pub fn dropout(&mut self, x: NodeId, keep_prob: f64) -> Result<NodeId> {
        check_keep_prob(keep_prob)?;
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if keep_prob == 1.0 {
            return Ok(x);
        }
        let mask = dropout_mask::<T>(self.graph.shape(x), keep_prob, rng)?;
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Gradients of every bound parameter, keyed by path. Parameters the
    /// loss does not reach get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(path, &id)| (path.clone(), grads.get_or_zeros(id, self.graph.shape(id))))
            .collect()
    }
}
