//! Poisson-Dirichlet weights and overlap functionals of the one-level cascade.
//!
//! A functional of `s` replicas drawn from `mu = sum_k xi_k delta_k` only sees
//! which replicas share an atom, so `E mu^{x s}[phi]` is a sum over set
//! partitions of the replicas. Sums over distinct atoms are expanded into
//! products of power sums `P_m = sum_k xi_k^m` by Moebius inversion on the
//! partition lattice; each functional compiles to a short polynomial in
//! `P_1..P_s` that is evaluated once per sample.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::estimate::{linearized_product, mc_aggregate, McEstimate};
use crate::overlap::{OverlapFunctional, Psi};
use crate::seeds::{derive_seed, stream, Role};

/// Atom cap per sample.
pub const MAX_ATOMS: usize = 100_000;
pub const DEFAULT_TAIL_TOL: f64 = 1e-6;
/// Above this the atoms decay too slowly for the cap to be useful.
pub const MAX_THETA: f64 = 0.95;
/// Largest replica count the partition expansion accepts.
pub const MAX_PARTITION_SIZE: usize = 7;

/// One Poisson-Dirichlet(`theta`) sample: decreasing weights and the
/// expected mass of the atoms that were not generated.
#[derive(Clone, Debug, PartialEq)]
pub struct PdWeights {
    theta: f64,
    weights: Vec<f64>,
    tail_mass_bound: f64,
    capped: bool,
}

impl PdWeights {
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tail_mass_bound(&self) -> f64 {
        self.tail_mass_bound
    }

    /// Whether generation stopped at [`MAX_ATOMS`] before the tail criterion held.
    pub fn capped(&self) -> bool {
        self.capped
    }

    /// `[P_1, ..., P_max_m]`. The tail mass counts towards `P_1` only; its
    /// contribution to higher powers is below `tail * cutoff^{m-1}`.
    pub fn power_sums(&self, max_m: usize) -> Vec<f64> {
        let mut p = vec![0.0; max_m];
        for &w in &self.weights {
            let mut wm = w;
            for slot in p.iter_mut() {
                *slot += wm;
                wm *= w;
            }
        }
        if let Some(p1) = p.first_mut() {
            *p1 += self.tail_mass_bound;
        }
        p
    }
}

/// Poisson-Dirichlet sampler from the arrival times of a unit Poisson process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdSampler {
    theta: f64,
    tail_tol: f64,
    max_atoms: usize,
    normalizer_scale: f64,
}

impl PdSampler {
    pub fn new(theta: f64, tail_tol: f64) -> Result<Self> {
        ensure(theta > 0.0 && theta < 1.0, "theta", || format!("must lie in (0, 1), got {theta}"))?;
        ensure(theta <= MAX_THETA, "theta", || {
            format!("above {MAX_THETA} the sampler cannot reach a useful tail bound, got {theta}")
        })?;
        ensure(tail_tol > 0.0 && tail_tol < 1.0, "tail_tol", || format!("must lie in (0, 1), got {tail_tol}"))?;
        Ok(Self {
            theta,
            tail_tol,
            max_atoms: MAX_ATOMS,
            normalizer_scale: 1.0,
        })
    }

    /// Multiplies the normalizer by `scale`, breaking the sampler on purpose.
    #[doc(hidden)]
    pub fn with_normalizer_scale(self, scale: f64) -> Self {
        Self {
            normalizer_scale: scale,
            ..self
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Atoms `eta_k = Gamma_k^{-1/theta}` until the expected mass below the
    /// current atom, `theta / (1 - theta) eta^{1 - theta}`, drops under
    /// `tail_tol` times the running total.
    pub fn sample(&self, seed: u64) -> PdWeights {
        let theta = self.theta;
        let mut rng = stream(seed);
        let mut atoms = Vec::with_capacity(1024);
        let (mut gamma, mut total, mut tail) = (0.0f64, 0.0f64, f64::INFINITY);
        let ratio = theta / (1.0 - theta);
        let inv = -1.0 / theta;
        let half = theta == 0.5;
        let mut capped = true;
        while atoms.len() < self.max_atoms {
            let e: f64 = Exp1.sample(&mut rng);
            gamma += e;
            let eta = if half { 1.0 / (gamma * gamma) } else { gamma.powf(inv) };
            atoms.push(eta);
            total += eta;
            // eta^{1 - theta} = eta * gamma
            tail = ratio * eta * gamma;
            if tail < self.tail_tol * total {
                capped = false;
                break;
            }
        }
        let z = total + tail;
        let norm = z * self.normalizer_scale;
        PdWeights {
            theta,
            weights: atoms.iter().map(|a| a / norm).collect(),
            tail_mass_bound: tail / z,
            capped,
        }
    }
}

/// Draws one PD(`theta`) sample from stream `seed`.
pub fn sample_pd(theta: f64, seed: u64, tail_tol: f64) -> Result<PdWeights> {
    Ok(PdSampler::new(theta, tail_tol)?.sample(seed))
}

/// Set partitions of `{0..s}` as restricted growth strings.
fn restricted_growth_strings(s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if s == 0 {
        out.push(Vec::new());
        return out;
    }
    let mut a = vec![0usize; s];
    loop {
        out.push(a.clone());
        // increment the rightmost position that can grow
        let mut i = s - 1;
        loop {
            if i == 0 {
                return out;
            }
            let max_prefix = a[..i].iter().copied().max().unwrap_or(0);
            if a[i] <= max_prefix {
                a[i] += 1;
                a[i + 1..].fill(0);
                break;
            }
            i -= 1;
        }
    }
}

/// `E mu^{x s}[f]` as a polynomial in power sums: monomials are sorted part lists.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPolynomial {
    s: usize,
    terms: Vec<(Vec<u8>, f64)>,
}

impl PartitionPolynomial {
    /// Compiles `value(labels)`, a function of which replicas share an atom.
    pub fn compile(s: usize, value: impl Fn(&[usize]) -> f64) -> Result<Self> {
        ensure((1..=MAX_PARTITION_SIZE).contains(&s), "s", || {
            format!("partition expansion supports 1..={MAX_PARTITION_SIZE} replicas, got {s}")
        })?;
        let mut terms: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
        let mobius_cache: Vec<Vec<(Vec<usize>, f64)>> = (0..=s)
            .map(|r| {
                restricted_growth_strings(r)
                    .into_iter()
                    .map(|sigma| {
                        let blocks = sigma.iter().max().map_or(0, |m| m + 1);
                        let mu = (0..blocks)
                            .map(|g| {
                                let size = sigma.iter().filter(|&&x| x == g).count();
                                let sign = if size % 2 == 1 { 1.0 } else { -1.0 };
                                sign * (1..size).product::<usize>() as f64
                            })
                            .product();
                        (sigma, mu)
                    })
                    .collect()
            })
            .collect();
        for labels in restricted_growth_strings(s) {
            let v = value(&labels);
            if v == 0.0 {
                continue;
            }
            let r = labels.iter().max().map_or(0, |m| m + 1);
            let sizes: Vec<usize> = (0..r).map(|b| labels.iter().filter(|&&x| x == b).count()).collect();
            for (sigma, mu) in &mobius_cache[r] {
                let groups = sigma.iter().max().map_or(0, |m| m + 1);
                let mut parts = vec![0u8; groups];
                for (b, &g) in sigma.iter().enumerate() {
                    parts[g] += sizes[b] as u8;
                }
                parts.sort_unstable();
                *terms.entry(parts).or_insert(0.0) += v * mu;
            }
        }
        Ok(Self {
            s,
            terms: terms.into_iter().filter(|(_, c)| *c != 0.0).collect(),
        })
    }

    pub fn of_functional(phi: &OverlapFunctional) -> Result<Self> {
        Self::compile(phi.s(), |labels| phi.on_labels(labels))
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Evaluates on `power_sums[m - 1] = P_m`.
    pub fn eval(&self, power_sums: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(parts, c)| c * parts.iter().map(|&m| power_sums[m as usize - 1]).product::<f64>())
            .sum()
    }
}

/// Power sums of independent PD samples, shared by every functional evaluated on them.
#[derive(Clone, Debug, PartialEq)]
pub struct PdBatch {
    theta: f64,
    seed: u64,
    sums: Vec<Vec<f64>>,
    n_capped: usize,
    max_tail: f64,
}

impl PdBatch {
    /// Sample `i` uses the stream derived from `(seed, i)`.
    pub fn sample(sampler: &PdSampler, n_samples: usize, seed: u64, max_m: usize) -> Result<Self> {
        ensure(n_samples >= 2, "n_samples", || format!("need at least two, got {n_samples}"))?;
        let per: Vec<(Vec<f64>, bool, f64)> = (0..n_samples as u64)
            .into_par_iter()
            .map(|i| {
                let w = sampler.sample(derive_seed(seed, Role::Cascade, i));
                (w.power_sums(max_m), w.capped(), w.tail_mass_bound())
            })
            .collect();
        Ok(Self {
            theta: sampler.theta,
            seed,
            n_capped: per.iter().filter(|p| p.1).count(),
            max_tail: per.iter().map(|p| p.2).fold(0.0, f64::max),
            sums: per.into_iter().map(|p| p.0).collect(),
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    /// Samples that hit the atom cap.
    pub fn n_capped(&self) -> usize {
        self.n_capped
    }

    pub fn max_tail_mass(&self) -> f64 {
        self.max_tail
    }

    pub fn max_m(&self) -> usize {
        self.sums.first().map_or(0, Vec::len)
    }

    fn aggregate(&self, values: &[f64]) -> Result<McEstimate> {
        Ok(mc_aggregate(values)?.with_provenance(0, self.seed))
    }

    fn values(&self, poly: &PartitionPolynomial) -> Result<Vec<f64>> {
        ensure(poly.s() <= self.max_m(), "s", || {
            format!("batch holds power sums up to {}, need {}", self.max_m(), poly.s())
        })?;
        Ok(self.sums.iter().map(|p| poly.eval(p)).collect())
    }

    pub fn functional(&self, phi: &OverlapFunctional) -> Result<McEstimate> {
        self.aggregate(&self.values(&PartitionPolynomial::of_functional(phi)?)?)
    }

    pub fn moment(&self, m: usize) -> Result<McEstimate> {
        ensure(m >= 1 && m <= self.max_m(), "m", || format!("must lie in 1..={}, got {m}", self.max_m()))?;
        self.aggregate(&self.sums.iter().map(|p| p[m - 1]).collect::<Vec<_>>())
    }

    /// Signed per-sample values of the GG residual, `k` one-based.
    pub fn gg_values(&self, s: usize, k: usize, psi: Psi, phi: &OverlapFunctional) -> Result<Vec<f64>> {
        ensure(phi.s() == s, "phi", || format!("acts on {} replicas, s = {s}", phi.s()))?;
        ensure(k >= 1 && k <= s, "k", || format!("must lie in 1..={s}, got {k}"))?;
        let k = k - 1;
        let new = PartitionPolynomial::compile(s + 1, |l| psi.on_bit(l[k] == l[s]) * phi.on_labels(&l[..s]))?;
        let pair = PartitionPolynomial::compile(2, |l| psi.on_bit(l[0] == l[1]))?;
        let plain = PartitionPolynomial::of_functional(phi)?;
        let others = PartitionPolynomial::compile(s, |l| {
            (0..s).filter(|&j| j != k).map(|j| psi.on_bit(l[k] == l[j])).sum::<f64>() * phi.on_labels(l)
        })?;
        let (a, b, c, d) = (self.values(&new)?, self.values(&pair)?, self.values(&plain)?, self.values(&others)?);
        let bc = linearized_product(&b, &c);
        let sf = s as f64;
        Ok((0..self.len()).map(|i| a[i] - bc[i] / sf - d[i] / sf).collect())
    }

    pub fn gg_residual(&self, s: usize, k: usize, psi: Psi, phi: &OverlapFunctional) -> Result<McEstimate> {
        Ok(self.aggregate(&self.gg_values(s, k, psi, phi)?)?.abs())
    }
}

/// `E Sigma xi^m = prod_{j=1}^{m-1} (j - theta) / (m - 1)!`.
pub fn pd_moment_exact(theta: f64, m: u32) -> f64 {
    (1..m).map(|j| (f64::from(j) - theta) / f64::from(j)).product()
}

/// Monte Carlo `E mu^{x s}[phi]` under PD(`theta`).
pub fn pd_overlap_functional(theta: f64, phi: &OverlapFunctional, n_samples: usize, seed: u64) -> Result<McEstimate> {
    PdBatch::sample(&PdSampler::new(theta, DEFAULT_TAIL_TOL)?, n_samples, seed, phi.s())?.functional(phi)
}

/// Estimate of `E Sigma xi^m` with its closed form.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MomentEstimate {
    pub estimate: McEstimate,
    pub exact: f64,
}

pub fn pd_power_moment(theta: f64, m: u32, n_samples: usize, seed: u64) -> Result<MomentEstimate> {
    ensure(m >= 1, "m", || "moments start at 1".into())?;
    let batch = PdBatch::sample(&PdSampler::new(theta, DEFAULT_TAIL_TOL)?, n_samples, seed, m as usize)?;
    Ok(MomentEstimate {
        estimate: batch.moment(m as usize)?,
        exact: pd_moment_exact(theta, m),
    })
}

/// `|E mu^{s+1}[psi(R_{k,s+1}) phi] - (1/s) E mu^2[psi] E mu^s[phi] - (1/s) sum_{l != k} E mu^s[psi(R_kl) phi]|`.
#[allow(clippy::too_many_arguments)]
pub fn gg_residual_pd(
    theta: f64,
    s: usize,
    k: usize,
    psi: Psi,
    phi: &OverlapFunctional,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    PdBatch::sample(&PdSampler::new(theta, DEFAULT_TAIL_TOL)?, n_samples, seed, s + 1)?.gg_residual(s, k, psi, phi)
}
