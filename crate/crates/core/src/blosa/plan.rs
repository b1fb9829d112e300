//! Block partitioning and block-length selection.

use crate::attention::Validity;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Split of `n` tokens into `m` blocks of length `r` with `pad` trailing pads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockPlan {
    pub n: usize,
    pub r: usize,
    pub m: usize,
    pub pad: usize,
}

impl BlockPlan {
    pub fn new(n: usize, r: usize) -> Result<Self> {
        if n == 0 || r == 0 {
            return Err(invalid(format!("block plan needs n, r >= 1, got n={n} r={r}")));
        }
        let m = n.div_ceil(r);
        Ok(BlockPlan { n, r, m, pad: m * r - n })
    }

    pub fn padded_len(&self) -> usize {
        self.m * self.r
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.r
    }

    /// Token validity `[.., m, r]`: pads are invalid, as are tokens flagged
    /// invalid in `tokens` (`[.., n]`, all valid when absent).
    pub fn token_validity(&self, lead: &[usize], tokens: Option<&Validity>) -> Result<Validity> {
        let rows: usize = lead.iter().product();
        let mut flags = Vec::with_capacity(rows * self.padded_len());
        for b in 0..rows {
            for t in 0..self.padded_len() {
                flags.push(t < self.n && tokens.map_or(true, |v| v.flags()[b * self.n + t]));
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([self.m, self.r]);
        Validity::new(&shape, flags)
    }
}

/// Peak score elements per feature for block length `r`: intra-block
/// `r^2 * m` plus inter-block `m^2`.
pub fn xi(n: usize, r: usize) -> usize {
    let m = n.div_ceil(r);
    r * r * m + m * m
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(1.0) as usize
}

/// `round((2n)^(1/3))`, ties up, clamped to `[1, n]`.
pub fn select_block_length(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(invalid("sequence length must be at least 1"));
    }
    Ok(round_half_up((2.0 * n as f64).cbrt()).clamp(1, n))
}

/// Block length for a batch of `b` lengths with mean `mu` and standard
/// deviation `sigma`, sized for the expected maximum `sigma * sqrt(2 ln b) + mu`.
pub fn select_block_length_batched(mu: f64, sigma: f64, b: usize) -> Result<usize> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(invalid(format!("mean length must be positive, got {mu}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("length deviation must be non-negative, got {sigma}")));
    }
    if b == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let bound = sigma * (2.0 * (b as f64).ln()).sqrt() + mu;
    Ok(round_half_up((2.0 * bound).cbrt()))
}

/// Exhaustive minimizer of [`xi`] over `r` in `[1, n]`; ties go to the
/// smaller `r`.
pub fn brute_force_block_length(n: usize) -> (usize, usize) {
    (1..=n.max(1))
        .map(|r| (r, xi(n, r)))
        .min_by_key(|&(r, cost)| (cost, r))
        .unwrap()
}

/// Splits `x [.., n, d]` into zero-padded blocks `[.., m, r, d]`.
pub fn partition<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<(Tensor<T>, BlockPlan, Validity)> {
    let rank = x.rank();
    if rank < 2 {
        return Err(shape_err("partition", format!("expected [.., n, d], got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let plan = BlockPlan::new(n, r)?;
    let lead = &x.shape()[..rank - 2];
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * plan.padded_len() * d);
    for row in x.data().chunks(n * d) {
        data.extend_from_slice(row);
        data.resize(data.len() + plan.pad * d, T::zero());
    }
    let mut shape = lead.to_vec();
    shape.extend([plan.m, plan.r, d]);
    let validity = plan.token_validity(lead, None)?;
    Ok((Tensor::new(&shape, data)?, plan, validity))
}

/// Inverse of [`partition`]: `[.., m, r, d]` back to `[.., n, d]`.
pub fn departition<T: Scalar>(blocks: &Tensor<T>, plan: &BlockPlan) -> Result<Tensor<T>> {
    let rank = blocks.rank();
    if rank < 3 || blocks.shape()[rank - 3] != plan.m || blocks.shape()[rank - 2] != plan.r {
        return Err(shape_err(
            "departition",
            format!("blocks {:?} do not match m={} r={}", blocks.shape(), plan.m, plan.r),
        ));
    }
    let d = blocks.shape()[rank - 1];
    let mut data = Vec::with_capacity(blocks.len() / plan.padded_len() * plan.n);
    for row in blocks.data().chunks(plan.padded_len() * d) {
        data.extend_from_slice(&row[..plan.n * d]);
    }
    let mut shape = blocks.shape()[..rank - 3].to_vec();
    shape.extend([plan.n, d]);
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cubes() {
        assert_eq!(select_block_length(4).unwrap(), 2);
        assert_eq!(select_block_length(32).unwrap(), 4);
        assert_eq!(select_block_length(1).unwrap(), 1);
        assert!(select_block_length(0).is_err());
    }

    #[test]
    fn hundred_tokens_against_brute_force() {
        assert_eq!(select_block_length(100).unwrap(), 6);
        assert_eq!(brute_force_block_length(100), (5, 900));
        assert_eq!(xi(100, 6), 901);
    }

    #[test]
    fn batched_examples() {
        assert_eq!(select_block_length_batched(20.0, 10.0, 64).unwrap(), 5);
        for mu in [1.0, 7.0, 20.0, 100.0] {
            let plain = select_block_length(mu as usize).unwrap();
            assert_eq!(select_block_length_batched(mu, 0.0, 64).unwrap(), plain);
            assert_eq!(select_block_length_batched(mu, 9.0, 1).unwrap(), plain);
        }
        assert!(select_block_length_batched(0.0, 1.0, 4).is_err());
        assert!(select_block_length_batched(-3.0, 1.0, 4).is_err());
    }

    #[test]
    fn plan_shapes() {
        assert_eq!(BlockPlan::new(6, 2).unwrap(), BlockPlan { n: 6, r: 2, m: 3, pad: 0 });
        assert_eq!(BlockPlan::new(5, 2).unwrap(), BlockPlan { n: 5, r: 2, m: 3, pad: 1 });
        assert_eq!(BlockPlan::new(3, 8).unwrap(), BlockPlan { n: 3, r: 8, m: 1, pad: 5 });
    }

    #[test]
    fn odd_length_pads_last_block() {
        let x = Tensor::<f64>::from_fn(&[5, 2], |k| k as f64 + 1.0);
        let (blocks, plan, v) = partition(&x, 2).unwrap();
        assert_eq!(blocks.shape(), &[3, 2, 2]);
        assert_eq!(&blocks.data()[8..], &[9.0, 10.0, 0.0, 0.0]);
        assert_eq!(&v.flags()[4..], &[true, false]);
        assert_eq!(departition(&blocks, &plan).unwrap(), x);
    }
}
