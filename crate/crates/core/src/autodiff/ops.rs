//! Forward and backward kernels for every op kind.
//!
//! All reductions run sequentially over the reduced axis so that results are
//! bit-reproducible.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Operation recorded on a [`Graph`](super::Graph) node.
///
/// Shape rules:
/// - `MatMul`: `[.., p, q] x [q, s] -> [.., p, s]`, or both operands with the
///   same leading axes (batched).
/// - `Linear`: `x [.., p, q]`, `w [q, s]`, `b [s]` -> `x w + b`.
/// - `Add`, `Mul`: second operand has the same shape as the first or a
///   shape equal to its trailing axes (broadcast over leading axes).
/// - `Gate`: `g, a, b` of one shape -> `g * a + (1 - g) * b`.
/// - `Concat`/`Slice`: along `axis`, all other axes equal.
/// - `Softmax`, `LogSoftmax`: along `axis`; a slice that is entirely `-inf`
///   yields all zeros (`Softmax`) or all `-inf` (`LogSoftmax`).
/// - `Sum`, `Max`: remove `axis`.
/// - `Transpose`: swap two axes.
/// - `Embedding`: table `[N, d]` -> `shape ++ [d]`, one row per id.
/// - `Reshape`: same element count, storage shared.
/// - `Expand`: insert a new axis of length `count` at `axis` by repetition.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Linear,
    Add,
    Mul,
    Gate,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Tanh,
    Sigmoid,
    Relu,
    Elu,
    Exp,
    Log,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Sum { axis: usize },
    Max { axis: usize },
    ScalarMul(f64),
    ScalarAdd(f64),
    Transpose { a: usize, b: usize },
    Embedding { ids: Vec<usize>, shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Expand { axis: usize, count: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Gate => "gate",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Elu => "elu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Sum { .. } => "sum",
            OpKind::Max { .. } => "max",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::ScalarAdd(_) => "scalar_add",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Embedding { .. } => "embedding",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Expand { .. } => "expand",
        }
    }

    /// Number of inputs, or `None` for variadic kinds.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Concat { .. } => None,
            OpKind::Linear | OpKind::Gate => Some(3),
            OpKind::MatMul | OpKind::Add | OpKind::Mul => Some(2),
            _ => Some(1),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses attribute-free kinds by name. Axis-taking kinds parse to their
/// common form over axis 0 (`sum`, `max`, `concat`, `softmax`,
/// `log_softmax`) or the first two axes (`transpose`); use the enum directly
/// for other attributes.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "linear" => OpKind::Linear,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "gate" => OpKind::Gate,
            "concat" => OpKind::Concat { axis: 0 },
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "relu" => OpKind::Relu,
            "elu" => OpKind::Elu,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "softmax" => OpKind::Softmax { axis: 0 },
            "log_softmax" => OpKind::LogSoftmax { axis: 0 },
            "sum" => OpKind::Sum { axis: 0 },
            "max" => OpKind::Max { axis: 0 },
            "transpose" => OpKind::Transpose { a: 0, b: 1 },
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// `(outer, len, inner)` factorisation of `shape` around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_check(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if is_suffix(a, b) {
        Ok(())
    } else {
        Err(shape_err(
            op,
            format!("operand {b:?} is neither {a:?} nor a trailing-axes suffix of it"),
        ))
    }
}

/// Sum of `g` over leading axes down to `len` trailing elements.
fn reduce_leading<T: Scalar>(g: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks_exact(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

struct MatDims {
    batch: usize,
    p: usize,
    q: usize,
    s: usize,
    batched_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", format!("operands must be at least 2-D: {a:?} x {b:?}")));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (bq, s) = (b[b.len() - 2], b[b.len() - 1]);
    if q != bq {
        return Err(shape_err(
            "matmul",
            format!("inner axes differ: {a:?} (axis {}) x {b:?} (axis {})", a.len() - 1, b.len() - 2),
        ));
    }
    let batched_rhs = b.len() > 2;
    if batched_rhs && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(shape_err("matmul", format!("leading axes differ: {a:?} x {b:?}")));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let mut out_shape = a.to_vec();
    *out_shape.last_mut().unwrap() = s;
    Ok(MatDims {
        batch,
        p,
        q,
        s,
        batched_rhs,
        out_shape,
    })
}

fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], rows: usize, q: usize, s: usize) {
    for i in 0..rows {
        let crow = &mut c[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * s..(k + 1) * s];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<T>, MatDims)> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); d.batch * d.p * d.s];
    if d.batched_rhs {
        for n in 0..d.batch {
            gemm(
                &a.data()[n * d.p * d.q..(n + 1) * d.p * d.q],
                &b.data()[n * d.q * d.s..(n + 1) * d.q * d.s],
                &mut out[n * d.p * d.s..(n + 1) * d.p * d.s],
                d.p,
                d.q,
                d.s,
            );
        }
    } else {
        gemm(a.data(), b.data(), &mut out, d.batch * d.p, d.q, d.s);
    }
    Ok((out, d))
}

/// dA = dC Bᵀ and dB = Aᵀ dC, restricted to the requested sides.
fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let (p, q, s) = (d.p, d.q, d.s);
    let blocks: Vec<(usize, usize)> = if d.batched_rhs {
        (0..d.batch).map(|n| (n * p, n)).collect()
    } else {
        vec![(0, 0)]
    };
    let rows_per_block = if d.batched_rhs { p } else { d.batch * p };

    let da = need_a.then(|| {
        let mut da = vec![T::zero(); a.len()];
        let mut bt = vec![T::zero(); q * s];
        for &(row0, bi) in &blocks {
            // Row-update form against Bᵀ keeps the inner loop contiguous.
            let bdat = &b.data()[bi * q * s..(bi + 1) * q * s];
            for k in 0..q {
                for j in 0..s {
                    bt[j * q + k] = bdat[k * s + j];
                }
            }
            gemm(
                &g[row0 * s..(row0 + rows_per_block) * s],
                &bt,
                &mut da[row0 * q..(row0 + rows_per_block) * q],
                rows_per_block,
                s,
                q,
            );
        }
        da
    });

    let db = need_b.then(|| {
        let mut db = vec![T::zero(); b.len()];
        for &(row0, bi) in &blocks {
            let dbb = &mut db[bi * q * s..(bi + 1) * q * s];
            for i in row0..row0 + rows_per_block {
                let grow = &g[i * s..(i + 1) * s];
                for k in 0..q {
                    let aik = a.data()[i * q + k];
                    let drow = &mut dbb[k * s..(k + 1) * s];
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv = *dv + aik * gv;
                    }
                }
            }
        }
        db
    });
    Ok((da, db))
}

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    x.map(f)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn permute_axes_swap(shape: &[usize], a: usize, b: usize) -> (Vec<usize>, Vec<usize>) {
    // Output shape and, for each output axis, the stride of the input axis it reads.
    let mut in_strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut strides = in_strides;
    strides.swap(a, b);
    (out_shape, strides)
}

fn transpose_data<T: Scalar>(x: &Tensor<T>, a: usize, b: usize) -> Result<Tensor<T>> {
    let (out_shape, strides) = permute_axes_swap(x.shape(), a, b);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        // Increment the multi-index in output order.
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let (outer, len, inner) = around(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(src[at(k)]);
            }
            if max == T::neg_infinity() {
                let fill = if log { T::neg_infinity() } else { T::zero() };
                for k in 0..len {
                    out[at(k)] = fill;
                }
                continue;
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total = total + e;
            }
            if log {
                let lse = total.ln();
                for k in 0..len {
                    out[at(k)] = src[at(k)] - max - lse;
                }
            } else {
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Forward evaluation of `kind` on `inputs`.
pub(crate) fn forward<T: Scalar>(kind: &OpKind, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match kind.arity() {
        Some(n) if n != inputs.len() => {
            return Err(shape_err(
                kind_static(kind),
                format!("expects {n} inputs, got {}", inputs.len()),
            ))
        }
        None if inputs.is_empty() => {
            return Err(shape_err(kind_static(kind), "expects at least one input"))
        }
        _ => {}
    }
    let x = inputs[0];
    match kind {
        OpKind::MatMul => {
            let (out, d) = matmul_forward(x, inputs[1])?;
            Tensor::new(&d.out_shape, out)
        }
        OpKind::Linear => {
            let (w, b) = (inputs[1], inputs[2]);
            if w.rank() != 2 || b.shape() != [w.shape()[1]] {
                return Err(shape_err(
                    "linear",
                    format!("weight {:?} must be 2-D and bias {:?} must match its axis 1", w.shape(), b.shape()),
                ));
            }
            let (mut out, d) = matmul_forward(x, w)?;
            for row in out.chunks_exact_mut(d.s) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o = *o + bv;
                }
            }
            Tensor::new(&d.out_shape, out)
        }
        OpKind::Add | OpKind::Mul => {
            let b = inputs[1];
            broadcast_check(kind_static(kind), x.shape(), b.shape())?;
            let bl = b.len();
            let bd = b.data();
            let out = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let bv = bd[i % bl];
                    if *kind == OpKind::Add {
                        a + bv
                    } else {
                        a * bv
                    }
                })
                .collect();
            Tensor::new(x.shape(), out)
        }
        OpKind::Gate => {
            let (a, b) = (inputs[1], inputs[2]);
            if a.shape() != x.shape() || b.shape() != x.shape() {
                return Err(shape_err(
                    "gate",
                    format!("gate {:?}, a {:?}, b {:?} must agree", x.shape(), a.shape(), b.shape()),
                ));
            }
            let out = x
                .data()
                .iter()
                .zip(a.data())
                .zip(b.data())
                .map(|((&g, &av), &bv)| g * av + (T::one() - g) * bv)
                .collect();
            Tensor::new(x.shape(), out)
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            check_axis("concat", x.shape(), axis)?;
            let mut out_shape = x.shape().to_vec();
            out_shape[axis] = 0;
            for t in inputs {
                if t.rank() != x.rank()
                    || t.shape()[..axis] != x.shape()[..axis]
                    || t.shape()[axis + 1..] != x.shape()[axis + 1..]
                {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} and {:?} differ off axis {axis}", x.shape(), t.shape()),
                    ));
                }
                out_shape[axis] += t.shape()[axis];
            }
            let (outer, _, inner) = around(x.shape(), axis);
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&out_shape, out)
        }
        OpKind::Slice { axis, start, len } => {
            let (axis, start, len) = (*axis, *start, *len);
            check_axis("slice", x.shape(), axis)?;
            if len == 0 || start + len > x.shape()[axis] {
                return Err(shape_err(
                    "slice",
                    format!("range {start}..{} outside axis {axis} of {:?}", start + len, x.shape()),
                ));
            }
            let (outer, full, inner) = around(x.shape(), axis);
            let mut out_shape = x.shape().to_vec();
            out_shape[axis] = len;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Tensor::new(&out_shape, out)
        }
        OpKind::Tanh => unary(x, |v| v.tanh()),
        OpKind::Sigmoid => unary(x, sigmoid),
        OpKind::Relu => unary(x, |v| if v > T::zero() { v } else { T::zero() }),
        OpKind::Elu => unary(x, |v| if v > T::zero() { v } else { v.exp() - T::one() }),
        OpKind::Exp => unary(x, |v| v.exp()),
        OpKind::Log => unary(x, |v| v.ln()),
        OpKind::Softmax { axis } => {
            check_axis("softmax", x.shape(), *axis)?;
            softmax_rows(x, *axis, false)
        }
        OpKind::LogSoftmax { axis } => {
            check_axis("log_softmax", x.shape(), *axis)?;
            softmax_rows(x, *axis, true)
        }
        OpKind::Sum { axis } | OpKind::Max { axis } => {
            let axis = *axis;
            check_axis(kind_static(kind), x.shape(), axis)?;
            let (outer, len, inner) = around(x.shape(), axis);
            let is_sum = matches!(kind, OpKind::Sum { .. });
            let src = x.data();
            let mut out = vec![if is_sum { T::zero() } else { T::neg_infinity() }; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = if is_sum { *d + v } else { d.max(v) };
                    }
                }
            }
            Tensor::new(&removed_axis(x.shape(), axis), out)
        }
        OpKind::ScalarMul(c) => {
            let c = T::from_f64(*c);
            unary(x, |v| v * c)
        }
        OpKind::ScalarAdd(c) => {
            let c = T::from_f64(*c);
            unary(x, |v| v + c)
        }
        OpKind::Transpose { a, b } => {
            check_axis("transpose", x.shape(), *a)?;
            check_axis("transpose", x.shape(), *b)?;
            transpose_data(x, *a, *b)
        }
        OpKind::Embedding { ids, shape } => {
            if x.rank() != 2 {
                return Err(shape_err("embedding", format!("table must be 2-D, got {:?}", x.shape())));
            }
            if shape.iter().product::<usize>() != ids.len() {
                return Err(shape_err(
                    "embedding",
                    format!("{} ids cannot fill index shape {shape:?}", ids.len()),
                ));
            }
            let (vocab, dim) = (x.shape()[0], x.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::InvalidArgument(format!(
                        "embedding: id {id} out of vocabulary of size {vocab}"
                    )));
                }
                out.extend_from_slice(&x.data()[id * dim..(id + 1) * dim]);
            }
            let mut out_shape = shape.clone();
            out_shape.push(dim);
            Tensor::new(&out_shape, out)
        }
        OpKind::Reshape { shape } => x.reshape(shape),
        OpKind::Expand { axis, count } => {
            let (axis, count) = (*axis, *count);
            if axis > x.rank() || count == 0 {
                return Err(shape_err(
                    "expand",
                    format!("cannot insert axis {axis} of length {count} into {:?}", x.shape()),
                ));
            }
            let outer: usize = x.shape()[..axis].iter().product();
            let inner: usize = x.shape()[axis..].iter().product();
            let mut out = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                let chunk = &x.data()[o * inner..(o + 1) * inner];
                for _ in 0..count {
                    out.extend_from_slice(chunk);
                }
            }
            let mut out_shape = x.shape().to_vec();
            out_shape.insert(axis, count);
            Tensor::new(&out_shape, out)
        }
    }
}

fn kind_static(kind: &OpKind) -> &'static str {
    kind.name()
}

fn elementwise<T: Scalar>(shape: &[usize], a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    Tensor::new(shape, a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
}

/// Gradients of `kind` with respect to each input, given the upstream
/// gradient `g` of its output `out`. Entries for inputs with `need == false`
/// are `None`.
pub(crate) fn backward<T: Scalar>(
    kind: &OpKind,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let x = inputs[0];
    let gd = g.data();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    match kind {
        OpKind::MatMul | OpKind::Linear => {
            let (da, db) = matmul_backward(x, inputs[1], gd, need[0], need[1])?;
            if let Some(da) = da {
                grads[0] = Some(Tensor::new(x.shape(), da)?);
            }
            if let Some(db) = db {
                grads[1] = Some(Tensor::new(inputs[1].shape(), db)?);
            }
            if *kind == OpKind::Linear && need[2] {
                let b = inputs[2];
                grads[2] = Some(Tensor::new(b.shape(), reduce_leading(gd, b.len()))?);
            }
        }
        OpKind::Add => {
            if need[0] {
                grads[0] = Some(g.clone());
            }
            if need[1] {
                let b = inputs[1];
                grads[1] = Some(if b.shape() == x.shape() {
                    g.clone()
                } else {
                    Tensor::new(b.shape(), reduce_leading(gd, b.len()))?
                });
            }
        }
        OpKind::Mul => {
            let b = inputs[1];
            let bl = b.len();
            if need[0] {
                let bd = b.data();
                let v = gd.iter().enumerate().map(|(i, &gv)| gv * bd[i % bl]).collect();
                grads[0] = Some(Tensor::new(x.shape(), v)?);
            }
            if need[1] {
                let prod: Vec<T> = gd.iter().zip(x.data()).map(|(&gv, &a)| gv * a).collect();
                grads[1] = Some(Tensor::new(b.shape(), reduce_leading(&prod, bl))?);
            }
        }
        OpKind::Gate => {
            let (a, b) = (inputs[1], inputs[2]);
            if need[0] {
                let v = gd
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&gv, (&av, &bv))| gv * (av - bv))
                    .collect();
                grads[0] = Some(Tensor::new(x.shape(), v)?);
            }
            if need[1] {
                grads[1] = Some(elementwise(x.shape(), gd, x.data(), |gv, gate| gv * gate)?);
            }
            if need[2] {
                grads[2] = Some(elementwise(x.shape(), gd, x.data(), |gv, gate| gv * (T::one() - gate))?);
            }
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            let (outer, total, inner) = around(out.shape(), axis);
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[axis];
                if need[i] {
                    let mut v = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        v.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    grads[i] = Some(Tensor::new(t.shape(), v)?);
                }
                offset += len;
            }
        }
        OpKind::Slice { axis, start, len } => {
            let (outer, full, inner) = around(x.shape(), *axis);
            let mut v = vec![T::zero(); x.len()];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                v[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
        OpKind::Tanh => {
            grads[0] = Some(elementwise(x.shape(), gd, out.data(), |gv, y| gv * (T::one() - y * y))?);
        }
        OpKind::Sigmoid => {
            grads[0] = Some(elementwise(x.shape(), gd, out.data(), |gv, y| gv * y * (T::one() - y))?);
        }
        OpKind::Relu => {
            grads[0] = Some(elementwise(x.shape(), gd, x.data(), |gv, v| {
                if v > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            })?);
        }
        OpKind::Elu => {
            let v = gd
                .iter()
                .zip(x.data().iter().zip(out.data()))
                .map(|(&gv, (&xv, &y))| if xv > T::zero() { gv } else { gv * (y + T::one()) })
                .collect();
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
        OpKind::Exp => {
            grads[0] = Some(elementwise(x.shape(), gd, out.data(), |gv, y| gv * y)?);
        }
        OpKind::Log => {
            grads[0] = Some(elementwise(x.shape(), gd, x.data(), |gv, v| gv / v)?);
        }
        OpKind::Softmax { axis } | OpKind::LogSoftmax { axis } => {
            let log = matches!(kind, OpKind::LogSoftmax { .. });
            let (outer, len, inner) = around(x.shape(), *axis);
            let y = out.data();
            let mut v = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    if log {
                        if y[at(0)] == T::neg_infinity() && (0..len).all(|k| y[at(k)] == T::neg_infinity()) {
                            continue;
                        }
                        let mut gsum = T::zero();
                        for k in 0..len {
                            gsum = gsum + gd[at(k)];
                        }
                        for k in 0..len {
                            v[at(k)] = gd[at(k)] - y[at(k)].exp() * gsum;
                        }
                    } else {
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot = dot + gd[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            v[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
            }
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
        OpKind::Sum { axis } => {
            let (outer, len, inner) = around(x.shape(), *axis);
            let mut v = Vec::with_capacity(x.len());
            for o in 0..outer {
                for _ in 0..len {
                    v.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
        OpKind::Max { axis } => {
            let (outer, len, inner) = around(x.shape(), *axis);
            let src = x.data();
            let y = out.data();
            let mut v = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    // First maximal element takes the gradient.
                    if let Some(k) = (0..len).find(|&k| src[(o * len + k) * inner + i] == y[o * inner + i]) {
                        v[(o * len + k) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
        OpKind::ScalarMul(c) => {
            let c = T::from_f64(*c);
            grads[0] = Some(g.map(|v| v * c)?);
        }
        OpKind::ScalarAdd(_) => grads[0] = Some(g.clone()),
        OpKind::Transpose { a, b } => grads[0] = Some(transpose_data(g, *a, *b)?),
        OpKind::Embedding { ids, .. } => {
            let dim = x.shape()[1];
            let mut v = vec![T::zero(); x.len()];
            for (n, &id) in ids.iter().enumerate() {
                let src = &gd[n * dim..(n + 1) * dim];
                for (d, &s) in v[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
        OpKind::Reshape { .. } => grads[0] = Some(g.reshape(x.shape())?),
        OpKind::Expand { axis, count } => {
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[*axis..].iter().product();
            let mut v = vec![T::zero(); x.len()];
            for o in 0..outer {
                let dst = &mut v[o * inner..(o + 1) * inner];
                for c in 0..*count {
                    let src = &gd[(o * count + c) * inner..(o * count + c + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            grads[0] = Some(Tensor::new(x.shape(), v)?);
        }
    }
    for (i, n) in need.iter().enumerate() {
        if !n {
            grads[i] = None;
        }
    }
    Ok(grads)
}
