//! Monte Carlo estimates from independent batches.

use serde::Serialize;

use crate::error::{Error, Result};

/// Mean of independent batch values with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Independent batches (disorder realizations or PD samples).
    pub n_outer: usize,
    /// Replica draws per batch, zero when the batch value is exact.
    pub n_inner: usize,
    pub seed_base: u64,
}

impl McEstimate {
    /// Same estimate with `|mean|`, for residuals reported as magnitudes.
    pub fn abs(self) -> Self {
        Self {
            mean: self.mean.abs(),
            ..self
        }
    }

    pub fn with_provenance(self, n_inner: usize, seed_base: u64) -> Self {
        Self {
            n_inner,
            seed_base,
            ..self
        }
    }

    pub fn scaled(self, c: f64) -> Self {
        Self {
            mean: self.mean * c,
            stderr: self.stderr * c.abs(),
            ..self
        }
    }

    /// `|mean| <= k * stderr`.
    pub fn within(self, k: f64) -> bool {
        self.mean.abs() <= k * self.stderr
    }
}

/// Aggregates per-batch values: mean and `sd / sqrt(n)` with the `n - 1` sample variance.
pub fn mc_aggregate(batch_values: &[f64]) -> Result<McEstimate> {
    let n = batch_values.len();
    if n < 2 {
        return Err(Error::TooFewBatches(n));
    }
    let mean = batch_values.iter().sum::<f64>() / n as f64;
    let var = batch_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n_outer: n,
        n_inner: 0,
        seed_base: 0,
    })
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// First-order linearization of `mean(b) * mean(c)`: per-batch values whose
/// mean equals the product and whose spread carries its delta-method error.
pub fn linearized_product(b: &[f64], c: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), c.len());
    let (mb, mc) = (mean(b), mean(c));
    b.iter().zip(c).map(|(bi, ci)| bi * mc + mb * ci - mb * mc).collect()
}

/// First-order linearization of `mean(num) / mean(den)`.
pub fn linearized_ratio(num: &[f64], den: &[f64]) -> Vec<f64> {
    assert_eq!(num.len(), den.len());
    let (mn, md) = (mean(num), mean(den));
    let r = mn / md;
    num.iter().zip(den).map(|(n, d)| r + (n - r * d) / md).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_basic() {
        let est = mc_aggregate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(est.mean, 2.5);
        // sample variance 5/3, divided by n = 4
        assert!((est.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(est.n_outer, 4);
        assert!(matches!(mc_aggregate(&[1.0]), Err(Error::TooFewBatches(1))));
        assert!(mc_aggregate(&[]).is_err());
    }

    #[test]
    fn two_point_and_constant_batches() {
        let est = mc_aggregate(&[0.0, 1.0]).unwrap();
        assert_eq!((est.mean, est.stderr), (0.5, 0.5));
        assert_eq!(mc_aggregate(&[3.0; 5]).unwrap().stderr, 0.0);
    }

    #[test]
    fn clt_scale_of_the_standard_error() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::seeds::stream(1);
        let v: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let est = mc_aggregate(&v).unwrap();
        assert!((est.stderr - 0.01).abs() < 0.0005, "{est:?}");
    }

    #[test]
    fn linearizations_preserve_the_point_estimate() {
        let b = [1.0, 2.0, 4.0];
        let c = [0.5, 0.25, 1.0];
        let p = linearized_product(&b, &c);
        assert!((mean(&p) - mean(&b) * mean(&c)).abs() < 1e-15);
        let r = linearized_ratio(&b, &c);
        assert!((mean(&r) - mean(&b) / mean(&c)).abs() < 1e-14);
        // a constant factor carries no extra variance
        let ones = [1.0; 3];
        for (x, y) in linearized_product(&b, &ones).iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
