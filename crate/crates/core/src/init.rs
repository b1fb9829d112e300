//! Weight initializers and dropout masks.

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Glorot/Xavier uniform: entries i.i.d. on `±sqrt(6 / (fan_in + fan_out))`.
/// The result has shape `[fan_in, fan_out]`.
pub fn glorot_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(invalid("glorot_uniform: fans must be at least 1"));
    }
    let limit = glorot_limit(fan_in, fan_out);
    uniform(&[fan_in, fan_out], -limit, limit, rng)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..=hi))).collect();
    Tensor::new(shape, data)
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(std * standard_normal(rng))).collect();
    Tensor::new(shape, data)
}

/// Box-Muller draw from N(0, 1).
pub fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Inverted-dropout multiplier: each entry is `1 / keep_prob` with
/// probability `keep_prob`, else 0.
pub fn dropout_mask<T: Scalar>(shape: &[usize], keep_prob: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    check_keep_prob(keep_prob)?;
    let scale = T::from_f64(1.0 / keep_prob);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { T::zero() })
        .collect();
    Tensor::new(shape, data)
}

pub(crate) fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(invalid(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    Ok(())
}

/// Dropout on a plain tensor. Identity at inference time or when
/// `keep_prob == 1`.
pub fn dropout<T: Scalar>(x: &Tensor<T>, keep_prob: f64, rng: &mut Rng, training: bool) -> Result<Tensor<T>> {
    check_keep_prob(keep_prob)?;
    if !training || keep_prob == 1.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.shape(), keep_prob, rng)?;
    Tensor::new(
        x.shape(),
        x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn glorot_limit_for_three_by_three_is_one() {
        assert_eq!(glorot_limit(3, 3), 1.0);
    }

    #[test]
    fn glorot_samples_stay_within_limits() {
        let mut rng = stream(1, Stream::Init);
        let w = glorot_uniform::<f64>(100, 1000, &mut rng).unwrap();
        let lim = glorot_limit(100, 1000);
        assert_eq!(w.len(), 100_000);
        assert!(w.data().iter().all(|v| v.abs() <= lim));
    }

    #[test]
    fn glorot_sample_mean_is_near_zero() {
        let mut rng = stream(2, Stream::Init);
        let w = glorot_uniform::<f64>(300, 300, &mut rng).unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        // Uniform(-L, L) has variance L^2 / 3.
        let sigma = glorot_limit(300, 300) / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = stream(3, Stream::Dropout);
        let x = Tensor::<f64>::from_fn(&[4, 5], |i| i as f64 - 7.0);
        assert_eq!(dropout(&x, 1.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.3, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 0.0, &mut rng, true).is_err());
        assert!(dropout(&x, 1.5, &mut rng, false).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        // Per coordinate, the mean of N masked copies of x is within 3 sigma
        // of x, where sigma = |x| sqrt((1-p)/p) / sqrt(N).
        let mut rng = stream(4, Stream::Dropout);
        let keep = 0.75;
        let x = Tensor::<f64>::from_fn(&[8], |i| 0.5 + i as f64);
        let trials = 10_000;
        let mut acc = vec![0.0; 8];
        for _ in 0..trials {
            let y = dropout(&x, keep, &mut rng, true).unwrap();
            for (a, v) in acc.iter_mut().zip(y.data()) {
                *a += v;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let mean = a / trials as f64;
            let xi = x.data()[i];
            let sigma = xi * ((1.0 - keep) / keep).sqrt() / (trials as f64).sqrt();
            assert!((mean - xi).abs() < 3.0 * sigma, "coord {i}: {mean} vs {xi}");
        }
    }
}
