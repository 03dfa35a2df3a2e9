//! Perturbed free energies, their high-`T` limit, and the derivative identities.

use serde::Serialize;

use crate::error::{ensure, Result};
use crate::estimate::{mc_aggregate, McEstimate};
use crate::field::FieldGrid;
use crate::gibbs::{gibbs_weights, identity_terms, log_log, FieldEnsemble, BETA_C};
use crate::overlap::{OverlapFunctional, Psi};

/// `(1 / log log T) log((1/N) sum_j exp(beta (u X_{h_j}(alpha) + X_{h_j})))` for one disorder.
pub fn perturbed_free_energy(grid: &FieldGrid, alpha: f64, beta: f64, u: f64) -> Result<f64> {
    Ok(gibbs_weights(grid, beta, u, alpha)?.log_normalizer() / log_log(grid.t())?)
}

/// Parameters of the limiting free energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LimitParams {
    pub alpha: f64,
    pub beta: f64,
    pub u: f64,
}

impl LimitParams {
    /// Variance factor `(1 + u)^2 alpha + 1 - alpha`.
    pub fn v(&self) -> f64 {
        (1.0 + self.u).powi(2) * self.alpha + 1.0 - self.alpha
    }
}

/// Which closed form of the limit applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Branch {
    /// `u < 0`, `beta < 2 / sqrt(V)`: `beta^2 V / 4`.
    Quadratic = 1,
    /// `u < 0`, `beta >= 2 / sqrt(V)`: `beta sqrt(V) - 1`.
    Frozen = 2,
    /// `u >= 0`: `beta (alpha u + 1) - 1`.
    Linear = 3,
}

/// `lim_{T -> inf} f_{beta,T}(u)` for `beta > 2`, with the branch used. At the
/// boundary `beta = 2 / sqrt(V)` the two `u < 0` forms agree; the second is used.
pub fn limiting_free_energy(p: LimitParams) -> Result<(f64, Branch)> {
    let LimitParams { alpha, beta, u } = p;
    ensure(beta > BETA_C && beta.is_finite(), "beta", || {
        format!("the limit is stated for beta > {BETA_C}, got {beta}")
    })?;
    ensure((0.0..=1.0).contains(&alpha), "alpha", || format!("must lie in [0, 1], got {alpha}"))?;
    ensure(u > -1.0 && u.is_finite(), "u", || format!("must exceed -1, got {u}"))?;
    if u >= 0.0 {
        return Ok((beta * (alpha * u + 1.0) - 1.0, Branch::Linear));
    }
    let v = p.v();
    if beta < 2.0 / v.sqrt() {
        Ok((beta * beta * v / 4.0, Branch::Quadratic))
    } else {
        Ok((beta * v.sqrt() - 1.0, Branch::Frozen))
    }
}

/// Analytic and numerical values of a derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl DerivativeCheck {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(f64::MIN_POSITIVE)
    }
}

fn log_normalizer(grid: &FieldGrid, alpha: f64, beta: f64, u: f64) -> Result<f64> {
    Ok(gibbs_weights(grid, beta, u, alpha)?.log_normalizer())
}

/// `f'(0) = beta G[X(alpha)] / log log T` against a Richardson-extrapolated
/// central difference with base step `step`.
pub fn derivative_at_zero(grid: &FieldGrid, alpha: f64, beta: f64, step: f64) -> Result<DerivativeCheck> {
    ensure(step > 0.0 && step < 0.5, "step", || format!("must lie in (0, 1/2), got {step}"))?;
    let ll = log_log(grid.t())?;
    let w = gibbs_weights(grid, beta, 0.0, alpha)?;
    let analytic = beta * w.average(grid.require(alpha)?) / ll;
    let central = |h: f64| -> Result<f64> {
        Ok((log_normalizer(grid, alpha, beta, h)? - log_normalizer(grid, alpha, beta, -h)?) / (2.0 * h))
    };
    let (d1, d2) = (central(step)?, central(step / 2.0)?);
    Ok(DerivativeCheck {
        analytic,
        numeric: (4.0 * d2 - d1) / 3.0 / ll,
    })
}

/// `beta^{-2} log log T f''(u)` from a Richardson-extrapolated second difference,
/// against the Gibbs variance of `X(alpha)` (analytic side).
pub fn second_derivative_variance_check(
    grid: &FieldGrid,
    alpha: f64,
    beta: f64,
    u: f64,
    step: f64,
) -> Result<DerivativeCheck> {
    ensure(step > 0.0 && u - step > -1.0, "step", || format!("step {step} leaves u > -1"))?;
    let w = gibbs_weights(grid, beta, u, alpha)?;
    let variance = w.variance(grid.require(alpha)?);
    let l0 = w.log_normalizer();
    let second = |h: f64| -> Result<f64> {
        Ok((log_normalizer(grid, alpha, beta, u + h)? - 2.0 * l0 + log_normalizer(grid, alpha, beta, u - h)?) / (h * h))
    };
    let (d1, d2) = (second(step)?, second(step / 2.0)?);
    Ok(DerivativeCheck {
        analytic: variance,
        numeric: (4.0 * d2 - d1) / 3.0 / (beta * beta),
    })
}

/// Disorder-averaged free energy along a `u` grid next to its limit.
#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub u: f64,
    pub finite: McEstimate,
    pub limit: f64,
    pub branch: Branch,
}

pub fn free_energy_curve(ens: &FieldEnsemble, alpha: f64, beta: f64, u_grid: &[f64]) -> Result<Vec<CurvePoint>> {
    u_grid
        .iter()
        .map(|&u| {
            let values = ens
                .grids()
                .iter()
                .map(|g| perturbed_free_energy(g, alpha, beta, u))
                .collect::<Result<Vec<_>>>()?;
            let (limit, branch) = limiting_free_energy(LimitParams { alpha, beta, u })?;
            Ok(CurvePoint {
                u,
                finite: mc_aggregate(&values)?.with_provenance(0, ens.seed_base()),
                limit,
                branch,
            })
        })
        .collect()
}

/// Per-disorder signed values of
/// `(1/beta) G^s[X_{h_k}(alpha) phi] / (log log T / 2) - (sum_l G^s[I(rho_kl) phi] - s G^{s+1}[I(rho_{k,s+1}) phi])`
/// with `I(rho) = min(max(rho, 0), alpha)`; `k` is one-based.
#[allow(clippy::too_many_arguments)]
fn bk_values(
    ens: &FieldEnsemble,
    alpha: f64,
    beta: f64,
    s: usize,
    k: usize,
    phi: &OverlapFunctional,
    n_draws: usize,
) -> Result<Vec<f64>> {
    ensure(k >= 1 && k <= s, "k", || format!("must lie in 1..={s}, got {k}"))?;
    ensure((0.0..=1.0).contains(&alpha), "alpha", || format!("must lie in [0, 1], got {alpha}"))?;
    let psi = Psi::TruncatedIntegral { alpha };
    let t = identity_terms(ens, alpha, beta, s, k - 1, phi, psi, n_draws)?;
    let half_ll = 0.5 * ens.log_log();
    Ok((0..ens.n_disorder())
        .map(|d| {
            let lhs = t.x_phi[d] / beta / half_ll;
            let rhs = alpha * t.phi[d] + t.psi_others[d] - s as f64 * t.psi_new[d];
            lhs - rhs
        })
        .collect())
}

/// Signed gap `(1/beta) E G[X(alpha)] / (log log T / 2) - (alpha - E G^2[I(rho_12)])`.
pub fn derivative_identity_gap(ens: &FieldEnsemble, alpha: f64, beta: f64, n_draws: usize) -> Result<McEstimate> {
    Ok(mc_aggregate(&bk_values(ens, alpha, beta, 1, 1, &OverlapFunctional::constant(1, 1.0), n_draws)?)?
        .with_provenance(n_draws, ens.seed_base()))
}

/// Magnitude of the generalized derivative identity for `s` replicas, test
/// function `phi`, and distinguished replica `k` (one-based).
#[allow(clippy::too_many_arguments)]
pub fn bk_residual(
    ens: &FieldEnsemble,
    alpha: f64,
    beta: f64,
    s: usize,
    k: usize,
    phi: &OverlapFunctional,
    n_draws: usize,
) -> Result<McEstimate> {
    Ok(mc_aggregate(&bk_values(ens, alpha, beta, s, k, phi, n_draws)?)?
        .abs()
        .with_provenance(n_draws, ens.seed_base()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{evaluate_field, sample_disorder};
    use crate::primes::PrimeSet;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid(t: f64, seed: u64) -> FieldGrid {
        let p = Arc::new(PrimeSet::sieve(t).unwrap());
        evaluate_field(&sample_disorder(p, seed), &[0.5, 1.0], 1024).unwrap()
    }

    #[test]
    fn limit_at_zero_perturbation() {
        for beta in [2.5, 3.0, 4.0] {
            let (f, b) = limiting_free_energy(LimitParams { alpha: 0.5, beta, u: 0.0 }).unwrap();
            assert_eq!(b, Branch::Linear);
            assert!((f - (beta - 1.0)).abs() < 1e-15);
        }
        assert!(limiting_free_energy(LimitParams { alpha: 0.5, beta: 2.0, u: 0.0 }).is_err());
        assert!(limiting_free_energy(LimitParams { alpha: 0.5, beta: 3.0, u: -1.0 }).is_err());
    }

    #[test]
    fn branch_selection() {
        // V = 0.5 * 0.25 + 0.5 = 0.625 at u = -0.5, so 2 / sqrt(V) = 2.5298
        let q = limiting_free_energy(LimitParams { alpha: 0.5, beta: 2.2, u: -0.5 }).unwrap();
        assert_eq!(q.1, Branch::Quadratic);
        assert!((q.0 - 2.2 * 2.2 * 0.625 / 4.0).abs() < 1e-15);
        let r = limiting_free_energy(LimitParams { alpha: 0.5, beta: 3.0, u: -0.5 }).unwrap();
        assert_eq!(r.1, Branch::Frozen);
        let boundary = 2.0 / 0.625f64.sqrt();
        let at = limiting_free_energy(LimitParams { alpha: 0.5, beta: boundary, u: -0.5 }).unwrap();
        assert_eq!(at.1, Branch::Frozen);
        assert!((at.0 - boundary * boundary * 0.625 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn limit_is_continuous_on_a_lattice() {
        // For every lattice cell whose corners use different branches, both
        // one-sided formulas are evaluated on the boundary and must agree.
        let alpha = 0.5;
        let us: Vec<f64> = (0..200).map(|i| -0.99 + 2.0 * i as f64 / 199.0).collect();
        let betas: Vec<f64> = (0..200).map(|i| 2.0 + 1e-6 + 4.0 * i as f64 / 199.0).collect();
        let mut worst: f64 = 0.0;
        for &u in &us {
            let v = LimitParams { alpha, beta: 3.0, u }.v();
            for w in betas.windows(2) {
                let a = limiting_free_energy(LimitParams { alpha, beta: w[0], u }).unwrap();
                let b = limiting_free_energy(LimitParams { alpha, beta: w[1], u }).unwrap();
                if a.1 != b.1 {
                    let star = 2.0 / v.sqrt();
                    worst = worst.max((star * star * v / 4.0 - (star * v.sqrt() - 1.0)).abs());
                }
            }
        }
        for &beta in &betas {
            // across u = 0, from the frozen (or quadratic) side to the linear side
            let lin = beta * (alpha * 0.0 + 1.0) - 1.0;
            let v0 = LimitParams { alpha, beta, u: 0.0 }.v();
            let left = if beta < 2.0 / v0.sqrt() { beta * beta * v0 / 4.0 } else { beta * v0.sqrt() - 1.0 };
            worst = worst.max((lin - left).abs());
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn first_derivative_matches_difference() {
        let g = grid(1e5, 3);
        let c = derivative_at_zero(&g, 0.5, 4.0, 1e-3).unwrap();
        assert!(c.relative_error() < 1e-6, "{c:?}");
    }

    #[test]
    fn second_derivative_is_variance() {
        let g = grid(1e5, 4);
        for u in [-0.5, 0.0, 0.7] {
            let c = second_derivative_variance_check(&g, 0.5, 3.0, u, 1e-3).unwrap();
            assert!(c.relative_error() < 1e-5, "u={u}: {c:?}");
        }
    }

    #[test]
    fn free_energy_rejects_small_t() {
        let p = Arc::new(PrimeSet::sieve(12.0).unwrap());
        let g = evaluate_field(&sample_disorder(p, 0), &[0.5, 1.0], 16).unwrap();
        assert!(perturbed_free_energy(&g, 0.5, 3.0, 0.0).is_err());
    }

    #[test]
    fn bk_first_case_equals_derivative_gap() {
        let p = Arc::new(PrimeSet::sieve(1e4).unwrap());
        let ens = FieldEnsemble::build(p, &[0.5], 256, 6, 2).unwrap();
        let gap = derivative_identity_gap(&ens, 0.5, 4.0, 2000).unwrap();
        let bk = bk_residual(&ens, 0.5, 4.0, 1, 1, &OverlapFunctional::constant(1, 1.0), 2000).unwrap();
        assert_eq!(bk.mean, gap.mean.abs());
        assert_eq!(bk.stderr, gap.stderr);
    }

    proptest! {
        #[test]
        fn limit_branches_are_consistent(alpha in 0.0f64..=1.0, beta in 2.0001f64..8.0, u in -0.999f64..3.0) {
            let p = LimitParams { alpha, beta, u };
            let (f, b) = limiting_free_energy(p).unwrap();
            prop_assert!(f.is_finite());
            prop_assert_eq!(b == Branch::Linear, u >= 0.0);
            // below zero the value never drops under the frozen form
            if u < 0.0 {
                prop_assert!(f >= beta * p.v().sqrt() - 1.0 - 1e-12);
            }
        }
    }
}
