//! Gibbs measures on the field grid, replica sampling, and overlap statistics.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::estimate::{linearized_product, linearized_ratio, mc_aggregate, McEstimate};
use crate::field::{evaluate_field, sample_disorder, FieldGrid, OverlapTable};
use crate::overlap::{OverlapFunctional, OverlapMatrix, Psi, Rounding};
use crate::primes::PrimeSet;
use crate::seeds::{derive_seed, stream, unit_f64, Role};

/// Critical inverse temperature of the unperturbed field.
pub const BETA_C: f64 = 2.0;

/// `log log T`, defined for `T > e^e`.
pub fn log_log(t: f64) -> Result<f64> {
    ensure(t > std::f64::consts::E.exp(), "T", || {
        format!("must exceed e^e so that log log T > 1, got {t}")
    })?;
    Ok(t.ln().ln())
}

/// Normalized Gibbs weights on the grid together with `log((1/N) sum_j e^{E_j})`.
#[derive(Clone, Debug)]
pub struct GibbsWeights {
    weights: Vec<f64>,
    log_normalizer: f64,
}

impl GibbsWeights {
    /// Weights proportional to `e^{E_j}`, shifted by `max E` before exponentiating.
    pub fn from_exponents(exponents: &[f64]) -> Result<Self> {
        ensure(!exponents.is_empty(), "exponents", || "empty grid".into())?;
        ensure(exponents.iter().all(|e| e.is_finite()), "exponents", || "must be finite".into())?;
        let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        let log_normalizer = max + (z / exponents.len() as f64).ln();
        Ok(Self { weights, log_normalizer })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    /// `G[v]`.
    pub fn average(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// `G[v^2] - G[v]^2`, computed about the mean.
    pub fn variance(&self, values: &[f64]) -> f64 {
        let m = self.average(values);
        self.weights.iter().zip(values).map(|(w, v)| w * (v - m).powi(2)).sum()
    }

    /// Independent grid indices drawn from the weights, `s` per tuple.
    pub fn sample(&self, s: usize, n_draws: usize, seed: u64) -> ReplicaDraws {
        let mut cdf = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let total = acc;
        let last = self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        let mut rng = stream(seed);
        let idx = (0..s * n_draws)
            .map(|_| {
                let u = unit_f64(&mut rng) * total;
                cdf.partition_point(|&c| c <= u).min(last) as u32
            })
            .collect();
        ReplicaDraws { s, idx }
    }
}

/// `n_draws` tuples of `s` replica positions, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaDraws {
    s: usize,
    idx: Vec<u32>,
}

impl ReplicaDraws {
    pub fn s(&self) -> usize {
        self.s
    }

    pub fn len(&self) -> usize {
        self.idx.len().checked_div(self.s).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn tuples(&self) -> impl Iterator<Item = &[u32]> {
        self.idx.chunks_exact(self.s.max(1))
    }
}

/// Gibbs weights `G_{beta,T}^{(u)}` proportional to `exp(beta (u X(alpha) + X))`.
pub fn gibbs_weights(grid: &FieldGrid, beta: f64, u: f64, alpha: f64) -> Result<GibbsWeights> {
    ensure(beta > 0.0 && beta.is_finite(), "beta", || format!("must be positive, got {beta}"))?;
    ensure(u > -1.0 && u.is_finite(), "u", || format!("must exceed -1, got {u}"))?;
    let x = grid.require(1.0)?;
    let exponents: Vec<f64> = if u == 0.0 {
        x.iter().map(|v| beta * v).collect()
    } else {
        let xa = grid.require(alpha)?;
        x.iter().zip(xa).map(|(v, va)| beta * (u * va + v)).collect()
    };
    GibbsWeights::from_exponents(&exponents)
}

/// Draws `n_draws` tuples of `s` i.i.d. replicas from `w`; each tuple is a list of grid indices.
pub fn sample_replicas(w: &GibbsWeights, s: usize, n_draws: usize, seed: u64) -> Vec<Vec<usize>> {
    w.sample(s, n_draws, seed)
        .tuples()
        .map(|t| t.iter().map(|&j| j as usize).collect())
        .collect()
}

/// Independent disorder realizations of the field at one `T`, evaluated once
/// at a fixed set of truncation levels and shared by every statistic.
#[derive(Clone, Debug)]
pub struct FieldEnsemble {
    t: f64,
    loglog: f64,
    seed_base: u64,
    overlaps: Arc<OverlapTable>,
    grids: Vec<FieldGrid>,
}

impl FieldEnsemble {
    /// Samples `n_disorder` realizations from `primes` (whose limit is `T`).
    /// Disorder `d` uses the seed derived from `(seed_base, d)` at every `T`.
    pub fn build(
        primes: Arc<PrimeSet>,
        alphas: &[f64],
        n: usize,
        n_disorder: usize,
        seed_base: u64,
    ) -> Result<Self> {
        let t = primes.limit();
        log_log(t)?;
        ensure(n_disorder >= 2, "n_disorder", || format!("need at least two, got {n_disorder}"))?;
        let mut levels = alphas.to_vec();
        levels.push(1.0);
        let overlaps = Arc::new(OverlapTable::new(&primes, n)?);
        let grids = (0..n_disorder as u64)
            .into_par_iter()
            .map(|d| {
                let sample = sample_disorder(primes.clone(), derive_seed(seed_base, Role::Disorder, d));
                evaluate_field(&sample, &levels, n)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_grids(grids, overlaps, seed_base)
    }

    pub fn from_grids(grids: Vec<FieldGrid>, overlaps: Arc<OverlapTable>, seed_base: u64) -> Result<Self> {
        ensure(grids.len() >= 2, "grids", || "need at least two disorder samples".into())?;
        let t = overlaps.t();
        ensure(grids.iter().all(|g| g.t() == t && g.n() == overlaps.n()), "grids", || {
            "grids must share T and N with the overlap table".into()
        })?;
        Ok(Self {
            t,
            loglog: log_log(t)?,
            seed_base,
            overlaps,
            grids,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn log_log(&self) -> f64 {
        self.loglog
    }

    pub fn n(&self) -> usize {
        self.overlaps.n()
    }

    pub fn n_disorder(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[FieldGrid] {
        &self.grids
    }

    pub fn overlaps(&self) -> &OverlapTable {
        &self.overlaps
    }

    pub fn seed_base(&self) -> u64 {
        self.seed_base
    }

    /// Overlap matrix of the replicas at grid indices `idx`.
    pub fn overlap_matrix(&self, idx: &[u32]) -> OverlapMatrix {
        OverlapMatrix::from_fn(idx.len(), |l, l2| self.rho(idx[l], idx[l2]))
    }

    #[inline]
    fn rho(&self, i: u32, j: u32) -> f64 {
        self.overlaps.between(i as usize, j as usize)
    }

    /// Runs `f` on every disorder with its unperturbed Gibbs weights and
    /// `n_draws` tuples of `s` replicas; results come back in disorder order.
    pub(crate) fn per_disorder<R: Send>(
        &self,
        beta: f64,
        s: usize,
        n_draws: usize,
        f: impl Fn(&FieldGrid, &GibbsWeights, &ReplicaDraws) -> R + Sync,
    ) -> Result<Vec<R>> {
        ensure(n_draws >= 1, "n_draws", || "need at least one draw".into())?;
        (0..self.grids.len())
            .into_par_iter()
            .map(|d| {
                let grid = &self.grids[d];
                let w = gibbs_weights(grid, beta, 0.0, 1.0)?;
                let draws = w.sample(s, n_draws, derive_seed(self.seed_base, Role::Replica, d as u64));
                Ok(f(grid, &w, &draws))
            })
            .collect()
    }
}

/// Gibbs mass of the bands `rho < eps`, `eps <= rho <= 1 - eps`, `rho > 1 - eps`.
#[derive(Clone, Copy, Debug)]
pub struct OverlapHistogram {
    pub low: McEstimate,
    pub middle: McEstimate,
    pub high: McEstimate,
}

/// Two-replica overlap distribution sorted into three bands. Negative
/// overlaps count towards the low band.
pub fn two_overlap_histogram(ens: &FieldEnsemble, beta: f64, eps: f64, n_draws: usize) -> Result<OverlapHistogram> {
    ensure(eps > 0.0 && eps < 0.5, "eps", || format!("must lie in (0, 1/2), got {eps}"))?;
    let counts = ens.per_disorder(beta, 2, n_draws, |_, _, draws| {
        let mut c = [0usize; 3];
        for t in draws.tuples() {
            let rho = ens.rho(t[0], t[1]);
            c[if rho < eps {
                0
            } else if rho > 1.0 - eps {
                2
            } else {
                1
            }] += 1;
        }
        c.map(|k| k as f64 / n_draws as f64)
    })?;
    let band = |b: usize| {
        mc_aggregate(&counts.iter().map(|c| c[b]).collect::<Vec<_>>())
            .map(|e| e.with_provenance(n_draws, ens.seed_base))
    };
    Ok(OverlapHistogram {
        low: band(0)?,
        middle: band(1)?,
        high: band(2)?,
    })
}

/// `E G^s[phi]` on real overlaps, with the share of draws excluded by band rounding.
#[derive(Clone, Copy, Debug)]
pub struct FieldFunctional {
    pub estimate: McEstimate,
    pub exclusion_rate: f64,
}

/// `E G_{beta,T}^{x s}[phi(R)]`. Tabulated functionals see overlaps rounded
/// into the bands `<= eps` and `>= 1 - eps`; draws with an overlap in between
/// are dropped and the estimate is the ratio over retained draws.
pub fn overlap_functional_field(
    ens: &FieldEnsemble,
    beta: f64,
    phi: &OverlapFunctional,
    eps: f64,
    n_draws: usize,
) -> Result<FieldFunctional> {
    let per = ens.per_disorder(beta, phi.s(), n_draws, |_, _, draws| {
        let (mut num, mut kept) = (0.0, 0usize);
        for t in draws.tuples() {
            if let Some(v) = phi.on_real(&ens.overlap_matrix(t), Rounding::Band(eps)) {
                num += v;
                kept += 1;
            }
        }
        (num / n_draws as f64, kept as f64 / n_draws as f64)
    })?;
    let num: Vec<f64> = per.iter().map(|p| p.0).collect();
    let den: Vec<f64> = per.iter().map(|p| p.1).collect();
    let kept = crate::estimate::mean(&den);
    ensure(kept > 0.0, "phi", || "every draw fell between the rounding bands".into())?;
    Ok(FieldFunctional {
        estimate: mc_aggregate(&linearized_ratio(&num, &den))?.with_provenance(n_draws, ens.seed_base),
        exclusion_rate: 1.0 - kept,
    })
}

/// Per-disorder Gibbs averages shared by the overlap identities. Replica
/// tuples have `s + 2` members: `0..s` carry `phi`, `s` is the new replica,
/// and `(s, s + 1)` gives a pair independent of `phi`.
#[derive(Clone, Debug, Default)]
pub(crate) struct IdentityTerms {
    /// `G^s[X_{h_k}(alpha) phi]`
    pub x_phi: Vec<f64>,
    /// `G[X(alpha)]`
    pub x_mean: Vec<f64>,
    /// `G^s[phi]`
    pub phi: Vec<f64>,
    /// `G^{s+1}[psi(rho_{k,s+1}) phi]`
    pub psi_new: Vec<f64>,
    /// `G^2[psi(rho_12)]`
    pub psi_pair: Vec<f64>,
    /// `sum_{l != k} G^s[psi(rho_kl) phi]`
    pub psi_others: Vec<f64>,
}

/// Collects [`IdentityTerms`] for every disorder. `k` is zero-based. Tabulated
/// `phi` sees overlaps rounded at one half. For constant `phi` the `X` term is
/// the exact Gibbs average rather than a replica estimate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn identity_terms(
    ens: &FieldEnsemble,
    alpha: f64,
    beta: f64,
    s: usize,
    k: usize,
    phi: &OverlapFunctional,
    psi: Psi,
    n_draws: usize,
) -> Result<IdentityTerms> {
    ensure(s >= 1 && phi.s() == s, "s", || format!("phi acts on {} replicas, s = {s}", phi.s()))?;
    ensure(k < s, "k", || format!("replica index {} outside 1..={s}", k + 1))?;
    let constant = phi.as_constant();
    let per = ens.per_disorder(beta, s + 2, n_draws, |grid, w, draws| {
        let xa = grid.require(alpha).expect("ensemble carries alpha");
        let x_mean = w.average(xa);
        let mut acc = [0.0; 5];
        for t in draws.tuples() {
            let f = match constant {
                Some(c) => c,
                None => phi
                    .on_real(&ens.overlap_matrix(&t[..s]), Rounding::Nearest)
                    .expect("nearest rounding keeps every draw"),
            };
            acc[0] += xa[t[k] as usize] * f;
            acc[1] += psi.on_real(ens.rho(t[k], t[s])) * f;
            acc[2] += psi.on_real(ens.rho(t[s], t[s + 1]));
            acc[3] += (0..s).filter(|&l| l != k).map(|l| psi.on_real(ens.rho(t[k], t[l]))).sum::<f64>() * f;
            acc[4] += f;
        }
        let m = acc.map(|a| a / n_draws as f64);
        let x_phi = constant.map_or(m[0], |c| c * x_mean);
        [x_phi, x_mean, constant.unwrap_or(m[4]), m[1], m[2], m[3]]
    })?;
    let mut terms = IdentityTerms::default();
    for p in per {
        terms.x_phi.push(p[0]);
        terms.x_mean.push(p[1]);
        terms.phi.push(p[2]);
        terms.psi_new.push(p[3]);
        terms.psi_pair.push(p[4]);
        terms.psi_others.push(p[5]);
    }
    Ok(terms)
}

/// `|E G^s[X_{h_k}(alpha) phi] - E G[X(alpha)] E G^s[phi]| / log log T`, `k` one-based.
#[allow(clippy::too_many_arguments)]
pub fn concentration_stat(
    ens: &FieldEnsemble,
    alpha: f64,
    beta: f64,
    s: usize,
    k: usize,
    phi: &OverlapFunctional,
    n_draws: usize,
) -> Result<McEstimate> {
    ensure(k >= 1, "k", || "replica index is one-based".into())?;
    let terms = identity_terms(ens, alpha, beta, s, k - 1, phi, Psi::TruncatedIntegral { alpha }, n_draws)?;
    let product = linearized_product(&terms.x_mean, &terms.phi);
    let diff: Vec<f64> = terms.x_phi.iter().zip(&product).map(|(a, b)| a - b).collect();
    Ok(mc_aggregate(&diff)?
        .abs()
        .scaled(1.0 / ens.log_log())
        .with_provenance(n_draws, ens.seed_base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample_disorder;
    use proptest::prelude::*;

    #[test]
    fn weights_normalize_and_match_direct_sum() {
        let e = [0.1, -2.0, 3.5, 0.0];
        let w = GibbsWeights::from_exponents(&e).unwrap();
        assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let direct = (e.iter().map(|x| x.exp()).sum::<f64>() / 4.0).ln();
        assert!((w.log_normalizer() - direct).abs() < 1e-14);
    }

    #[test]
    fn extreme_exponents_stay_finite() {
        let w = GibbsWeights::from_exponents(&[1e4, 1e4 - 1.0, -1e4]).unwrap();
        assert!(w.log_normalizer().is_finite());
        assert!(w.weights()[2] == 0.0 && w.weights()[0] > w.weights()[1]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let p = Arc::new(PrimeSet::sieve(1e3).unwrap());
        let g = evaluate_field(&sample_disorder(p, 1), &[0.5, 1.0], 32).unwrap();
        assert!(gibbs_weights(&g, 0.0, 0.0, 0.5).is_err());
        assert!(gibbs_weights(&g, 1.0, -1.0, 0.5).is_err());
        assert!(gibbs_weights(&g, 1.0, 0.5, 0.25).is_err());
        assert!(gibbs_weights(&g, 1.0, 0.5, 0.5).is_ok());
    }

    #[test]
    fn single_atom_sampling_is_degenerate() {
        let w = GibbsWeights::from_exponents(&[-1e6, 0.0, -1e6]).unwrap();
        let draws = sample_replicas(&w, 3, 50, 9);
        assert!(draws.iter().flatten().all(|&j| j == 1));
    }

    #[test]
    fn sampling_frequencies_follow_weights() {
        let w = GibbsWeights::from_exponents(&[0.0, 1.0, 2.0]).unwrap();
        let n = 200_000;
        let draws = w.sample(1, n, 3);
        let mut freq = [0.0; 3];
        draws.tuples().for_each(|t| freq[t[0] as usize] += 1.0 / n as f64);
        for (f, p) in freq.iter().zip(w.weights()) {
            assert!((f - p).abs() < 5.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
    }

    fn small_ensemble(beta_t: f64) -> FieldEnsemble {
        let p = Arc::new(PrimeSet::sieve(beta_t).unwrap());
        FieldEnsemble::build(p, &[0.5], 256, 8, 17).unwrap()
    }

    #[test]
    fn histogram_bands_sum_to_one() {
        let ens = small_ensemble(1e4);
        let h = two_overlap_histogram(&ens, 3.0, 0.2, 500).unwrap();
        let total = h.low.mean + h.middle.mean + h.high.mean;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_phi_concentration_vanishes() {
        let ens = small_ensemble(1e4);
        let c = concentration_stat(&ens, 0.5, 3.0, 1, 1, &OverlapFunctional::constant(1, 1.0), 100).unwrap();
        assert!(c.mean < 1e-12, "{c:?}");
    }

    #[test]
    fn ensemble_is_reproducible() {
        let a = small_ensemble(1e4);
        let b = small_ensemble(1e4);
        assert_eq!(a.grids(), b.grids());
        assert!(FieldEnsemble::build(Arc::new(PrimeSet::sieve(10.0).unwrap()), &[0.5], 8, 2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weights_are_a_probability_vector(e in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
            let w = GibbsWeights::from_exponents(&e).unwrap();
            prop_assert!(w.weights().iter().all(|&x| x >= 0.0));
            prop_assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // shifting every exponent moves only the normalizer
            let shifted: Vec<f64> = e.iter().map(|x| x + shift).collect();
            let ws = GibbsWeights::from_exponents(&shifted).unwrap();
            prop_assert!((ws.log_normalizer() - w.log_normalizer() - shift).abs() < 1e-10);
        }
    }
}
