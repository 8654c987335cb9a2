//! Gradient reweighting under uneven per-GPU batch sizes.
//!
//! Each GPU averages its own `b_i` sample gradients, scales the result by
//! `N * b_i / B`, and the cluster averages the N scaled vectors. The result
//! must equal the plain mean over all `B` samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-sample gradients grouped by GPU: `per_gpu[i][j]` is sample `j` on GPU `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradFixture<T> {
    pub per_gpu: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> GradFixture<T> {
    pub fn batch_sizes(&self) -> Vec<usize> {
        self.per_gpu.iter().map(Vec::len).collect()
    }

    pub fn global_batch(&self) -> usize {
        self.batch_sizes().iter().sum()
    }

    /// Common vector dimension; errors on the first mismatch.
    pub fn dim(&self) -> Result<usize> {
        let first = self
            .per_gpu
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Validation("fixture has no samples".into()))?
            .len();
        for v in self.per_gpu.iter().flatten() {
            if v.len() != first {
                return Err(Error::DimensionMismatch {
                    expected: first,
                    got: v.len(),
                });
            }
        }
        Ok(first)
    }

    pub fn scale(&self, c: T) -> Self {
        GradFixture {
            per_gpu: self
                .per_gpu
                .iter()
                .map(|g| g.iter().map(|v| v.iter().map(|&x| x * c).collect()).collect())
                .collect(),
        }
    }
}

/// Reweighted combination, summing per GPU first as a distributed run would.
pub fn weighted_combine<T: Scalar>(fixture: &GradFixture<T>) -> Result<Vec<T>> {
    let d = fixture.dim()?;
    if fixture.per_gpu.iter().any(Vec::is_empty) {
        return Err(Error::Validation("every GPU needs at least one sample".into()));
    }
    let n = T::count(fixture.per_gpu.len() as u64);
    let total = T::count(fixture.global_batch() as u64);
    let mut out = vec![T::zero(); d];
    for samples in &fixture.per_gpu {
        let b = T::count(samples.len() as u64);
        let mut local = vec![T::zero(); d];
        for v in samples {
            for (acc, &x) in local.iter_mut().zip(v) {
                *acc += x;
            }
        }
        let weight = n * b / total;
        for (o, s) in out.iter_mut().zip(local) {
            *o += weight * (s / b);
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Plain mean over every sample in index order.
pub fn global_mean<T: Scalar>(fixture: &GradFixture<T>) -> Result<Vec<T>> {
    let d = fixture.dim()?;
    let mut out = vec![T::zero(); d];
    for v in fixture.per_gpu.iter().flatten() {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let total = T::count(fixture.global_batch() as u64);
    Ok(out.into_iter().map(|x| x / total).collect())
}

/// `max |a - b| / max |b|`, with the denominator floored at the smallest
/// positive normal value.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs().as_f64()).fold(f64::MIN_POSITIVE, f64::max);
    num / den
}

/// Random fixture: 1..=8 GPUs, 1..=16 samples each, dimension 1..=32, entries in [-1, 1).
pub fn random_fixture<T: Scalar>(rng: &mut impl Rng) -> GradFixture<T> {
    let n = rng.gen_range(1..=8);
    let d = rng.gen_range(1..=32);
    let per_gpu = (0..n)
        .map(|_| {
            let b = rng.gen_range(1..=16);
            (0..b)
                .map(|_| (0..d).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect())
                .collect()
        })
        .collect();
    GradFixture { per_gpu }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub fixtures: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs `count` seeded random fixtures through both routes.
pub fn check_random(seed: u64, count: usize, tolerance: f64) -> GradCheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let fx = random_fixture::<f64>(&mut rng);
        let a = weighted_combine(&fx).expect("generated fixture is well formed");
        let b = global_mean(&fx).expect("generated fixture is well formed");
        worst = worst.max(relative_error(&a, &b));
    }
    GradCheckSummary {
        fixtures: count,
        max_relative_error: worst,
        tolerance,
        passed: worst <= tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uneven_split_example() {
        let fx = GradFixture::<f64> {
            per_gpu: vec![vec![vec![1.0], vec![2.0], vec![3.0]], vec![vec![10.0]]],
        };
        let g = weighted_combine(&fx).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_split_is_mean_of_means() {
        let fx = GradFixture::<f64> {
            per_gpu: vec![vec![vec![1.0, 0.0], vec![3.0, 2.0]], vec![vec![5.0, 4.0], vec![7.0, 6.0]]],
        };
        let g = weighted_combine(&fx).unwrap();
        let mean_of_means = [(2.0 + 6.0) / 2.0, (1.0 + 5.0) / 2.0];
        assert!((g[0] - mean_of_means[0]).abs() < 1e-12);
        assert!((g[1] - mean_of_means[1]).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let fx = GradFixture {
            per_gpu: vec![vec![vec![1.0, 2.0]], vec![vec![1.0]]],
        };
        assert!(matches!(
            weighted_combine(&fx),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn f32_route_agrees_loosely() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = random_fixture::<f32>(&mut rng);
        let a = weighted_combine(&fx).unwrap();
        let b = global_mean(&fx).unwrap();
        assert!(relative_error(&a, &b) < 1e-5);
    }
}
