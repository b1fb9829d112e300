//! Directional attention masks and per-token validity flags.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Token `j` attends to earlier tokens `i < j`.
    Forward,
    /// Token `j` attends to later tokens `i > j`.
    Backward,
    /// No restriction, diagonal included.
    None,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Forward => "forward",
            MaskKind::Backward => "backward",
            MaskKind::None => "none",
        }
    }

    /// Whether attendee `i` is visible to query `j`.
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Forward => i < j,
            MaskKind::Backward => i > j,
            MaskKind::None => true,
        }
    }
}

/// `n x n` additive mask over `{0, -inf}`; `entry(i, j)` is the bias added to
/// the score of attendee `i` for query `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    n: usize,
    kind: MaskKind,
    entries: Vec<f64>,
}

pub fn build_mask(n: usize, kind: MaskKind) -> Result<Mask> {
    if n == 0 {
        return Err(invalid("mask length must be at least 1"));
    }
    let entries = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if kind.allows(i, j) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(Mask { n, kind, entries })
}

impl Mask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn transpose(&self) -> Mask {
        let n = self.n;
        let entries = (0..n * n).map(|k| self.entries[(k % n) * n + k / n]).collect();
        let kind = match self.kind {
            MaskKind::Forward => MaskKind::Backward,
            MaskKind::Backward => MaskKind::Forward,
            MaskKind::None => MaskKind::None,
        };
        Mask { n, kind, entries }
    }
}

/// Per-token validity over `[.., n]`; padding positions are `false`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validity {
    shape: Vec<usize>,
    flags: Vec<bool>,
}

impl Validity {
    pub fn new(shape: &[usize], flags: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != flags.len() {
            return Err(shape_err(
                "validity",
                format!("{} flags cannot fill shape {shape:?}", flags.len()),
            ));
        }
        Ok(Validity {
            shape: shape.to_vec(),
            flags,
        })
    }

    pub fn all_valid(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Validity {
            shape: shape.to_vec(),
            flags: vec![true; n],
        }
    }

    /// `[lengths.len(), n]` with the first `lengths[b]` positions of row `b` valid.
    pub fn from_lengths(lengths: &[usize], n: usize) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > n) {
            return Err(invalid(format!("length {bad} exceeds padded length {n}")));
        }
        let flags = lengths.iter().flat_map(|&l| (0..n).map(move |i| i < l)).collect();
        Validity::new(&[lengths.len(), n], flags)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn all(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    /// True when some row (leading index) has no valid position.
    pub fn has_empty_row(&self) -> bool {
        self.flags.chunks(self.len()).any(|row| row.iter().all(|&f| !f))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Validity::new(shape, self.flags.clone())
    }

    /// `[.., n]` additive bias: 0 for valid positions, `-inf` otherwise.
    pub fn additive<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(
            &self.shape,
            self.flags
                .iter()
                .map(|&v| if v { T::zero() } else { T::neg_infinity() })
                .collect(),
        )
    }
}

/// Additive bias of shape `[.., nq, nk]` combining a direction mask with key
/// validity `[.., nk]`. Returns `None` when nothing is masked.
pub fn pair_bias<T: Scalar>(mask: Option<&Mask>, keys: &Validity) -> Result<Option<Tensor<T>>> {
    let n = keys.len();
    if let Some(m) = mask {
        if m.n() != n {
            return Err(shape_err(
                "mask",
                format!("mask is {0}x{0} but the sequence has {n} tokens", m.n()),
            ));
        }
    }
    let directional = mask.is_some_and(|m| m.kind() != MaskKind::None);
    if !directional && keys.all() {
        return Ok(None);
    }
    let rows = keys.flags().len() / n;
    let mut data = Vec::with_capacity(rows * n * n);
    for row in keys.flags().chunks(n) {
        for j in 0..n {
            for (i, &valid) in row.iter().enumerate() {
                let dir = mask.map_or(0.0, |m| m.entry(i, j));
                data.push(if valid { T::from_f64(dir) } else { T::neg_infinity() });
            }
        }
    }
    let mut shape = keys.shape().to_vec();
    shape.push(n);
    Ok(Some(Tensor::new(&shape, data)?))
}
