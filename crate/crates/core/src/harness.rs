//! Field-side identity residuals, field-versus-cascade comparisons, and trend checks.

use serde::Serialize;

use crate::cascade::{PdBatch, PdSampler, DEFAULT_TAIL_TOL};
use crate::error::{ensure, Result};
use crate::estimate::linearized_product;
use crate::gibbs::{identity_terms, overlap_functional_field, two_overlap_histogram, FieldEnsemble, BETA_C};
use crate::overlap::{OverlapFunctional, Psi};

pub use crate::estimate::{mc_aggregate, McEstimate};
pub use crate::overlap::OverlapMatrix;

/// `|E G^{s+1}[psi(rho_{k,s+1}) phi] - (1/s) E G^2[psi] E G^s[phi] - (1/s) sum_{l != k} E G^s[psi(rho_kl) phi]|`
/// on the field at the ensemble's `T`. `psi` defaults to `min(max(rho, 0), alpha)`.
#[allow(clippy::too_many_arguments)]
pub fn gg_residual_field(
    ens: &FieldEnsemble,
    beta: f64,
    alpha: f64,
    s: usize,
    k: usize,
    psi: Option<Psi>,
    phi: &OverlapFunctional,
    n_draws: usize,
) -> Result<McEstimate> {
    ensure(beta > BETA_C, "beta", || format!("must exceed {BETA_C}, got {beta}"))?;
    ensure(alpha > 0.0 && alpha < 1.0, "alpha", || format!("must lie in (0, 1), got {alpha}"))?;
    ensure(k >= 1 && k <= s, "k", || format!("must lie in 1..={s}, got {k}"))?;
    let psi = psi.unwrap_or(Psi::TruncatedIntegral { alpha });
    let t = identity_terms(ens, alpha, beta, s, k - 1, phi, psi, n_draws)?;
    let pair_phi = linearized_product(&t.psi_pair, &t.phi);
    let sf = s as f64;
    let values: Vec<f64> = (0..ens.n_disorder())
        .map(|d| t.psi_new[d] - pair_phi[d] / sf - t.psi_others[d] / sf)
        .collect();
    Ok(mc_aggregate(&values)?.abs().with_provenance(n_draws, ens.seed_base()))
}

/// One `T` of a field-versus-cascade comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub field: McEstimate,
    pub gap: f64,
    pub exclusion_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub beta: f64,
    pub theta: f64,
    pub eps: f64,
    pub cascade: McEstimate,
    pub rows: Vec<ComparisonRow>,
}

/// Field estimates of `E G^s[phi]` per `T` against the PD(`2/beta`) value.
pub fn compare_field_vs_cascade(
    ensembles: &[&FieldEnsemble],
    beta: f64,
    phi: &OverlapFunctional,
    eps: f64,
    n_draws: usize,
    n_pd_samples: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    ensure(beta > BETA_C, "beta", || format!("must exceed {BETA_C}, got {beta}"))?;
    let theta = BETA_C / beta;
    let batch = PdBatch::sample(&PdSampler::new(theta, DEFAULT_TAIL_TOL)?, n_pd_samples, seed, phi.s())?;
    let cascade = batch.functional(phi)?;
    let rows = ensembles
        .iter()
        .map(|ens| {
            let f = overlap_functional_field(ens, beta, phi, eps, n_draws)?;
            Ok(ComparisonRow {
                t: ens.t(),
                field: f.estimate,
                gap: f.estimate.mean - cascade.mean,
                exclusion_rate: f.exclusion_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        beta,
        theta,
        eps,
        cascade,
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SubcriticalRow {
    pub t: f64,
    pub low_band: McEstimate,
    pub functional: McEstimate,
    pub exclusion_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubcriticalReport {
    pub beta: f64,
    pub eps: f64,
    /// `phi(I_s)`, the limit of the functional when replicas never meet.
    pub functional_target: f64,
    pub rows: Vec<SubcriticalRow>,
}

/// Below `beta_c`: low-band two-overlap mass (target 1) and `E G^s[phi]` (target `phi(I_s)`) per `T`.
pub fn subcritical_report(
    ensembles: &[&FieldEnsemble],
    beta: f64,
    phi: &OverlapFunctional,
    eps: f64,
    n_draws: usize,
) -> Result<SubcriticalReport> {
    ensure(beta > 0.0 && beta < BETA_C, "beta", || format!("must lie in (0, {BETA_C}), got {beta}"))?;
    let rows = ensembles
        .iter()
        .map(|ens| {
            let h = two_overlap_histogram(ens, beta, eps, n_draws)?;
            let f = overlap_functional_field(ens, beta, phi, eps, n_draws)?;
            Ok(SubcriticalRow {
                t: ens.t(),
                low_band: h.low,
                functional: f.estimate,
                exclusion_rate: f.exclusion_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubcriticalReport {
        beta,
        eps,
        functional_target: phi.at_identity(),
        rows,
    })
}

/// Nonincreasing means, tolerating at most one rise, and only one no larger
/// than twice the pooled standard error of the two points.
pub fn is_nonincreasing(points: &[McEstimate]) -> bool {
    let mut inversions = 0;
    for w in points.windows(2) {
        let rise = w[1].mean - w[0].mean;
        if rise > 0.0 {
            inversions += 1;
            if inversions > 1 || rise > 2.0 * w[0].stderr.hypot(w[1].stderr) {
                return false;
            }
        }
    }
    true
}

/// Mirror of [`is_nonincreasing`].
pub fn is_nondecreasing(points: &[McEstimate]) -> bool {
    let flipped: Vec<McEstimate> = points.iter().map(|p| p.scaled(-1.0)).collect();
    is_nonincreasing(&flipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primes::PrimeSet;
    use std::sync::Arc;

    fn est(mean: f64, stderr: f64) -> McEstimate {
        McEstimate {
            mean,
            stderr,
            n_outer: 2,
            n_inner: 0,
            seed_base: 0,
        }
    }

    #[test]
    fn trend_rule() {
        assert!(is_nonincreasing(&[est(3.0, 0.1), est(2.0, 0.1), est(1.0, 0.1)]));
        assert!(is_nonincreasing(&[est(3.0, 0.1), est(3.2, 0.1), est(1.0, 0.1)]));
        assert!(!is_nonincreasing(&[est(3.0, 0.1), est(3.5, 0.1), est(1.0, 0.1)]));
        assert!(!is_nonincreasing(&[est(1.0, 0.1), est(1.1, 0.1), est(1.2, 0.1)]));
        assert!(is_nondecreasing(&[est(1.0, 0.1), est(1.1, 0.1), est(1.2, 0.1)]));
    }

    fn ensemble() -> FieldEnsemble {
        FieldEnsemble::build(Arc::new(PrimeSet::sieve(1e4).unwrap()), &[0.5], 256, 6, 4).unwrap()
    }

    #[test]
    fn zero_phi_has_zero_residual() {
        let ens = ensemble();
        let r = gg_residual_field(&ens, 4.0, 0.5, 2, 1, None, &OverlapFunctional::constant(2, 0.0), 500).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn constant_psi_is_paired_to_zero() {
        let ens = ensemble();
        let phi = OverlapFunctional::high_band(0.2);
        let psi = Some(Psi::Table { at_zero: 0.3, at_one: 0.3 });
        let r = gg_residual_field(&ens, 4.0, 0.5, 2, 2, psi, &phi, 500).unwrap();
        assert!(r.mean < 1e-15, "{r:?}");
    }

    #[test]
    fn constant_functional_compares_exactly() {
        let ens = ensemble();
        let rep = compare_field_vs_cascade(&[&ens], 4.0, &OverlapFunctional::constant(2, 1.0), 0.2, 200, 20, 1)
            .unwrap();
        // P_1 = 1 up to rounding in the normalization
        assert!((rep.cascade.mean - 1.0).abs() < 1e-12);
        assert!(rep.rows[0].gap.abs() < 1e-12);
        assert_eq!(rep.rows[0].field.mean, 1.0);
        assert_eq!(rep.theta, 0.5);
        let sub = subcritical_report(&[&ens], 1.0, &OverlapFunctional::constant(3, 1.0), 0.2, 200).unwrap();
        assert_eq!(sub.rows[0].functional.mean, 1.0);
        assert!(subcritical_report(&[&ens], 2.5, &OverlapFunctional::equality(), 0.2, 10).is_err());
    }
}
