//! The prime-phase random field `X_h = sum_p cos(theta_p - h log p) / sqrt(p)` on
//! a uniform grid of `[0, 1]`, its truncations, and its covariance structure.
//!
//! All grid sums go through one phasor kernel: each prime carries a complex
//! phasor that is rotated by `exp(-i log p / N)` per grid step, so the inner
//! loop is multiply-adds only. The kernel starts at the grid midpoint and walks
//! outwards in both directions, producing two grid values per rotation.

use std::f64::consts::{E, TAU};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::primes::{cutoff_for_alpha, PrimeSet};
use crate::seeds::{stream_at, unit_f64};

/// Primes per reduction block.
pub const PRIME_BLOCK: usize = 1 << 16;
/// Phasor steps between modulus renormalizations.
pub const RENORM_INTERVAL: usize = 1 << 12;
const LANES: usize = 8;

/// Grid size `max(1024, ceil(16 log T))`.
pub fn default_grid_size(t: f64) -> usize {
    (16.0 * t.ln()).ceil().max(1024.0) as usize
}

/// One draw of the uniform phases, one angle per prime.
#[derive(Clone, Debug)]
pub struct DisorderSample {
    primes: Arc<PrimeSet>,
    phases: Vec<f64>,
    seed: u64,
}

impl DisorderSample {
    pub fn primes(&self) -> &Arc<PrimeSet> {
        &self.primes
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Builds a sample from explicit phases (used for synthetic checks).
    pub fn from_phases(primes: Arc<PrimeSet>, phases: Vec<f64>, seed: u64) -> Result<Self> {
        ensure(phases.len() == primes.len(), "phases", || {
            format!("{} phases for {} primes", phases.len(), primes.len())
        })?;
        Ok(Self { primes, phases, seed })
    }

    /// Phase cache layout: little-endian `u64` seed, `u64` count, then the
    /// phases as `f64`.
    pub fn write_phase_cache(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 8 * self.phases.len());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(self.phases.len() as u64).to_le_bytes());
        for ph in &self.phases {
            bytes.extend_from_slice(&ph.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|source| Error::Io {
                context: format!("writing phase cache {}", path.display()),
                source,
            })
    }

    pub fn read_phase_cache(path: &Path, primes: Arc<PrimeSet>, seed: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Io {
                context: format!("reading phase cache {}", path.display()),
                source,
            })?;
        let bad = |reason: String| Error::BadCache {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || bytes.len() % 8 != 0 {
            return Err(bad("truncated header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
        if word(0) != seed {
            return Err(bad(format!("cache holds seed {}, wanted {seed}", word(0))));
        }
        let count = word(1) as usize;
        if count != primes.len() || bytes.len() != 16 + 8 * count {
            return Err(bad(format!("cache holds {count} phases for {} primes", primes.len())));
        }
        let phases = (0..count).map(|i| f64::from_bits(word(2 + i))).collect();
        Ok(Self { primes, phases, seed })
    }
}

/// Draws `theta_p` uniform on `[0, 2 pi)`. The phase of the `i`-th prime is the
/// `i`-th draw of the stream keyed by `seed`, whatever the thread layout.
pub fn sample_disorder(primes: Arc<PrimeSet>, seed: u64) -> DisorderSample {
    let mut phases = vec![0.0; primes.len()];
    phases
        .par_chunks_mut(PRIME_BLOCK)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = stream_at(seed, (b * PRIME_BLOCK) as u64);
            for ph in chunk {
                *ph = TAU * unit_f64(&mut rng);
            }
        });
    DisorderSample { primes, phases, seed }
}

/// Field values on `h_j = j / N`, `j = 0..N`, for several truncation levels.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    t: f64,
    alphas: Vec<f64>,
    n: usize,
    values: Vec<Vec<f64>>,
}

impl FieldGrid {
    /// Wraps precomputed values; `alphas` must be strictly increasing in `[0, 1]`.
    pub fn from_values(t: f64, alphas: Vec<f64>, n: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        ensure(n >= 1, "N", || "grid needs at least one point".into())?;
        ensure(alphas.windows(2).all(|w| w[0] < w[1]), "alphas", || {
            "must be strictly increasing".into()
        })?;
        ensure(alphas.iter().all(|a| (0.0..=1.0).contains(a)), "alphas", || {
            "must lie in [0, 1]".into()
        })?;
        ensure(
            values.len() == alphas.len() && values.iter().all(|v| v.len() == n),
            "values",
            || "shape must be alphas x N".into(),
        )?;
        Ok(Self { t, alphas, n, values })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self, j: usize) -> f64 {
        j as f64 / self.n as f64
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Values of `X(alpha)`, if `alpha` was evaluated.
    pub fn at(&self, alpha: f64) -> Option<&[f64]> {
        self.alphas
            .iter()
            .position(|&a| a == alpha)
            .map(|i| self.values[i].as_slice())
    }

    pub fn require(&self, alpha: f64) -> Result<&[f64]> {
        self.at(alpha).ok_or_else(|| Error::InvalidParameter {
            name: "alpha",
            reason: format!("truncation level {alpha} is not on the grid {:?}", self.alphas),
        })
    }

    /// Writes `h,alpha,value` rows.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "h,alpha,value")?;
        for (alpha, row) in self.alphas.iter().zip(&self.values) {
            for (j, v) in row.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{}",
                    crate::report::fmt_num(self.h(j)),
                    crate::report::fmt_num(*alpha),
                    crate::report::fmt_num(*v)
                )?;
            }
        }
        Ok(())
    }
}

fn sorted_alphas(alphas: &[f64]) -> Result<Vec<f64>> {
    ensure(!alphas.is_empty(), "alphas", || "need at least one truncation level".into())?;
    ensure(alphas.iter().all(|a| (0.0..=1.0).contains(a)), "alphas", || {
        format!("must lie in [0, 1], got {alphas:?}")
    })?;
    let mut out = alphas.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Evaluates `X_h(alpha)` for every requested `alpha` on an `N`-point grid.
/// `T` is the limit of the disorder's prime set.
pub fn evaluate_field(d: &DisorderSample, alphas: &[f64], n: usize) -> Result<FieldGrid> {
    ensure(n >= 1, "N", || "grid needs at least one point".into())?;
    let t = d.primes.limit();
    let alphas = sorted_alphas(alphas)?;
    let counts = alphas
        .iter()
        .map(|&a| cutoff_for_alpha(t, a).map(|c| d.primes.count_le(c)))
        .collect::<Result<Vec<_>>>()?;
    let primes = d.primes.primes();
    let values = cosine_sums_nested(
        &counts,
        n,
        |i| 1.0 / (primes[i] as f64).sqrt(),
        |i| d.phases[i],
        |i| (primes[i] as f64).ln(),
    );
    Ok(FieldGrid { t, alphas, n, values })
}

/// Truncated covariances `sum_{p <= cutoff(alpha)} cos(k log p / N) / (2p)` at every
/// grid lag `k = 0..N`.
#[derive(Clone, Debug)]
pub struct CovarianceTable {
    t: f64,
    n: usize,
    alphas: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl CovarianceTable {
    /// `T` is the limit of `primes`.
    pub fn new(primes: &PrimeSet, alphas: &[f64], n: usize) -> Result<Self> {
        ensure(n >= 1, "N", || "grid needs at least one point".into())?;
        let t = primes.limit();
        let alphas = sorted_alphas(alphas)?;
        let counts = alphas
            .iter()
            .map(|&a| cutoff_for_alpha(t, a).map(|c| primes.count_le(c)))
            .collect::<Result<Vec<_>>>()?;
        let p = primes.primes();
        let cov = cosine_sums_nested(
            &counts,
            n,
            |i| 0.5 / p[i] as f64,
            |_| 0.0,
            |i| (p[i] as f64).ln(),
        );
        Ok(Self { t, n, alphas, cov })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn at(&self, alpha: f64) -> Option<&[f64]> {
        self.alphas
            .iter()
            .position(|&a| a == alpha)
            .map(|i| self.cov[i].as_slice())
    }
}

/// Exact overlaps `rho(h_i, h_j)` between grid points, tabulated by lag.
#[derive(Clone, Debug)]
pub struct OverlapTable {
    t: f64,
    variance: f64,
    rho: Vec<f64>,
}

impl OverlapTable {
    pub fn new(primes: &PrimeSet, n: usize) -> Result<Self> {
        let table = CovarianceTable::new(primes, &[1.0], n)?;
        Ok(Self::from_covariances(table.t, &table.cov[0]))
    }

    /// Normalizes lag covariances by their value at lag zero.
    pub fn from_covariances(t: f64, cov: &[f64]) -> Self {
        let variance = cov[0];
        let rho = if variance > 0.0 {
            cov.iter().map(|c| c / variance).collect()
        } else {
            vec![1.0; cov.len()]
        };
        Self { t, variance, rho }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n(&self) -> usize {
        self.rho.len()
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn by_lag(&self) -> &[f64] {
        &self.rho
    }

    #[inline]
    pub fn between(&self, i: usize, j: usize) -> f64 {
        self.rho[i.abs_diff(j)]
    }
}

/// `E[X_h(alpha)^2] = sum_{p <= cutoff} 1 / (2p)`.
pub fn variance_of_truncation(primes: &PrimeSet, alpha_cutoff: f64) -> f64 {
    let mut acc = Neumaier::default();
    for &p in &primes.primes()[..primes.count_le(alpha_cutoff)] {
        acc.add(0.5 / p as f64);
    }
    acc.value()
}

fn covered_primes(primes: &PrimeSet, cutoff: f64) -> Result<&[u64]> {
    ensure(primes.limit() >= cutoff.floor(), "primes", || {
        format!("prime set up to {} does not cover cutoff {cutoff}", primes.limit())
    })?;
    Ok(&primes.primes()[..primes.count_le(cutoff)])
}

fn check_unit(name: &'static str, h: f64) -> Result<()> {
    ensure((0.0..=1.0).contains(&h), name, || format!("must lie in [0, 1], got {h}"))
}

/// `E[X_h(alpha) X_h2(alpha)] = sum_{p <= cutoff(alpha)} cos(|h - h2| log p) / (2p)`
/// by direct summation.
pub fn covariance_truncated(h: f64, h2: f64, alpha: f64, t: f64, primes: &PrimeSet) -> Result<f64> {
    check_unit("h", h)?;
    check_unit("h2", h2)?;
    let cutoff = cutoff_for_alpha(t, alpha)?;
    let d = (h - h2).abs();
    let mut acc = Neumaier::default();
    for &p in covered_primes(primes, cutoff)? {
        let p = p as f64;
        acc.add((d * p.ln()).cos() / (2.0 * p));
    }
    Ok(acc.value())
}

/// Overlap `rho(h, h2)`: the full-field covariance over the variance.
pub fn overlap_exact(h: f64, h2: f64, t: f64, primes: &PrimeSet) -> Result<f64> {
    if h == h2 {
        check_unit("h", h)?;
        return Ok(1.0);
    }
    let cov = covariance_truncated(h, h2, 1.0, t, primes)?;
    let var = variance_of_truncation(primes, t);
    Ok(if var > 0.0 { cov / var } else { 1.0 })
}

/// Prime-number-theorem approximation `log(min(log T, 1/|h - h2|)) / log log T`,
/// clamped to `[0, 1]`.
pub fn overlap_asymptotic(h: f64, h2: f64, t: f64) -> Result<f64> {
    ensure(h != h2, "h2", || "coincident points have overlap exactly 1".into())?;
    ensure(t > E.exp(), "T", || format!("must exceed e^e, got {t}"))?;
    let inv = 1.0 / (h - h2).abs();
    let log_t = t.ln();
    Ok((log_t.min(inv).ln() / log_t.ln()).clamp(0.0, 1.0))
}

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// For nested prime prefixes of lengths `counts` (nondecreasing), returns
/// `sum_{i < counts[a]} amp(i) cos(phase(i) - freq(i) j / n)` for every `a` and
/// every `j` in `0..n`.
///
/// Blocks of [`PRIME_BLOCK`] primes are evaluated independently and combined
/// with compensated summation in block order, so the result does not depend
/// on the number of worker threads.
pub(crate) fn cosine_sums_nested<A, P, F>(
    counts: &[usize],
    n: usize,
    amp: A,
    phase: P,
    freq: F,
) -> Vec<Vec<f64>>
where
    A: Fn(usize) -> f64 + Sync,
    P: Fn(usize) -> f64 + Sync,
    F: Fn(usize) -> f64 + Sync,
{
    let total = counts.iter().copied().max().unwrap_or(0);
    // Segment s covers prime indices [start_s, counts[s]).
    let segments: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(s, &end)| (if s == 0 { 0 } else { counts[s - 1] }, end))
        .collect();
    let n_blocks = total.div_ceil(PRIME_BLOCK);

    let partials: Vec<Vec<(usize, Vec<f64>)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * PRIME_BLOCK;
            let hi = (lo + PRIME_BLOCK).min(total);
            let mut scratch = PhasorScratch::new(n);
            segments
                .iter()
                .enumerate()
                .filter_map(|(s, &(a, e))| {
                    let (a, e) = (a.max(lo), e.min(hi));
                    (a < e).then(|| {
                        let mut out = vec![0.0; n];
                        scratch.accumulate((a..e).map(|i| (amp(i), phase(i), freq(i))), &mut out);
                        (s, out)
                    })
                })
                .collect()
        })
        .collect();

    (0..counts.len())
        .map(|level| {
            let mut acc = vec![Neumaier::default(); n];
            for block in &partials {
                for (s, part) in block {
                    if *s <= level {
                        for (a, v) in acc.iter_mut().zip(part) {
                            a.add(*v);
                        }
                    }
                }
            }
            acc.iter().map(Neumaier::value).collect()
        })
        .collect()
}

/// Per-lane accumulators for the mirrored phasor walk.
struct PhasorScratch {
    n: usize,
    center: usize,
    plus: Vec<[f64; LANES]>,
    minus: Vec<[f64; LANES]>,
}

impl PhasorScratch {
    fn new(n: usize) -> Self {
        let center = n / 2;
        let steps = center.max(n - 1 - center) + 1;
        Self {
            n,
            center,
            plus: vec![[0.0; LANES]; steps],
            minus: vec![[0.0; LANES]; steps],
        }
    }

    /// Adds `sum amp cos(phase - freq j / n)` over `terms` into `out`.
    fn accumulate(&mut self, terms: impl Iterator<Item = (f64, f64, f64)>, out: &mut [f64]) {
        let n = self.n as f64;
        let hc = self.center as f64 / n;
        self.plus.iter_mut().for_each(|a| *a = [0.0; LANES]);
        self.minus.iter_mut().for_each(|a| *a = [0.0; LANES]);

        let mut terms = terms.peekable();
        while terms.peek().is_some() {
            // Lane l holds z = amp exp(i (phase - freq h_c)) and the unit
            // rotor r = exp(-i freq m / n), stepped by w = exp(-i freq / n).
            let mut zr = [0.0; LANES];
            let mut zi = [0.0; LANES];
            let mut wr = [1.0; LANES];
            let mut wi = [0.0; LANES];
            for l in 0..LANES {
                let Some((a, ph, f)) = terms.next() else { break };
                let (s, c) = (ph - f * hc).sin_cos();
                zr[l] = a * c;
                zi[l] = a * s;
                let (s, c) = (f / n).sin_cos();
                wr[l] = c;
                wi[l] = -s;
            }
            let mut rr = [1.0; LANES];
            let mut ri = [0.0; LANES];
            let chunks = self
                .plus
                .chunks_mut(RENORM_INTERVAL)
                .zip(self.minus.chunks_mut(RENORM_INTERVAL));
            for (plus, minus) in chunks {
                for (p, q) in plus.iter_mut().zip(minus.iter_mut()) {
                    for l in 0..LANES {
                        let x = zr[l] * rr[l];
                        let y = zi[l] * ri[l];
                        p[l] += x - y;
                        q[l] += x + y;
                        let nr = rr[l] * wr[l] - ri[l] * wi[l];
                        let ni = rr[l] * wi[l] + ri[l] * wr[l];
                        rr[l] = nr;
                        ri[l] = ni;
                    }
                }
                for l in 0..LANES {
                    let inv = (rr[l] * rr[l] + ri[l] * ri[l]).sqrt().recip();
                    rr[l] *= inv;
                    ri[l] *= inv;
                }
            }
        }

        let c = self.center;
        for (m, p) in self.plus.iter().enumerate() {
            if c + m < self.n {
                out[c + m] += p.iter().sum::<f64>();
            }
        }
        for (m, q) in self.minus.iter().enumerate().skip(1) {
            if m <= c {
                out[c - m] += q.iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn primes_to(limit: f64) -> Arc<PrimeSet> {
        Arc::new(PrimeSet::sieve(limit).unwrap())
    }

    #[test]
    fn disorder_is_deterministic() {
        let p = primes_to(100.0);
        let a = sample_disorder(p.clone(), 1);
        let b = sample_disorder(p.clone(), 1);
        assert_eq!(a.phases(), b.phases());
        assert_eq!(a.phases().len(), 25);
        assert_ne!(a.phases(), sample_disorder(p, 2).phases());
        assert!(sample_disorder(primes_to(1.0), 5).phases().is_empty());
    }

    #[test]
    fn phases_are_uniform_on_circle() {
        // Mean of e^{i theta} over 1e5 phases: each coordinate has standard
        // deviation 1/sqrt(2n), so modulus < 3/sqrt(n) ~ 0.0095 w.h.p.
        let p = primes_to(1_400_000.0);
        assert!(p.len() >= 100_000);
        let d = sample_disorder(p, 11);
        let n = 100_000;
        let (c, s) = d.phases()[..n]
            .iter()
            .fold((0.0, 0.0), |(c, s), th| (c + th.cos(), s + th.sin()));
        let modulus = (c * c + s * s).sqrt() / n as f64;
        assert!(modulus < 0.02, "{modulus}");
        assert!(d.phases().iter().all(|&t| (0.0..TAU).contains(&t)));
    }

    #[test]
    fn single_prime_field() {
        // alpha = 0 keeps primes up to e, i.e. only p = 2.
        let t = primes_to(16.0);
        let d = DisorderSample::from_phases(t.clone(), vec![0.0; t.len()], 0).unwrap();
        let grid = evaluate_field(&d, &[0.0], 64).unwrap();
        let row = grid.at(0.0).unwrap();
        assert!((row[0] - 0.5f64.sqrt()).abs() < 1e-14, "{}", row[0]);
        for (j, v) in row.iter().enumerate() {
            let h = j as f64 / 64.0;
            assert!((v - (h * 2f64.ln()).cos() / 2f64.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_prime_range_is_zero() {
        let v = cosine_sums_nested(&[0, 0], 16, |_| 1.0, |_| 0.0, |_| 1.0);
        assert!(v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn phasor_matches_naive_summation() {
        let p = primes_to(10_000.0);
        let d = sample_disorder(p, 99);
        for n in [1usize, 2, 3, 17, 1024, 4096] {
            let fast = evaluate_field(&d, &[0.5, 1.0], n).unwrap();
            let slow = oracle::naive_field(&d, &[0.5, 1.0], n);
            for (fr, sr) in fast.rows().iter().zip(&slow) {
                let err = fr.iter().zip(sr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "n={n}: {err}");
            }
        }
    }

    #[test]
    fn renormalization_over_long_walks() {
        // 2^14 + 5 grid points walk past several renormalizations.
        let p = primes_to(2_000.0);
        let d = sample_disorder(p, 5);
        let n = (1 << 14) + 5;
        let fast = evaluate_field(&d, &[1.0], n).unwrap();
        let slow = oracle::naive_field(&d, &[1.0], n);
        let err = fast.rows()[0]
            .iter()
            .zip(&slow[0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn truncation_nesting_reconstructs_gap() {
        let p = primes_to(50_000.0);
        let d = sample_disorder(p.clone(), 8);
        let grid = evaluate_field(&d, &[0.3, 0.6, 1.0], 256).unwrap();
        let (lo, hi) = (cutoff_for_alpha(5e4, 0.3).unwrap(), cutoff_for_alpha(5e4, 0.6).unwrap());
        let primes = p.primes();
        for j in [0usize, 7, 128, 255] {
            let h = j as f64 / 256.0;
            let gap: f64 = (p.count_le(lo)..p.count_le(hi))
                .map(|i| {
                    let q = primes[i] as f64;
                    (d.phases()[i] - h * q.ln()).cos() / q.sqrt()
                })
                .sum();
            let diff = grid.at(0.6).unwrap()[j] - grid.at(0.3).unwrap()[j];
            assert!((diff - gap).abs() < 1e-12, "{diff} vs {gap}");
        }
    }

    #[test]
    fn grid_rejects_bad_input() {
        let p = primes_to(100.0);
        let d = sample_disorder(p, 1);
        assert!(evaluate_field(&d, &[1.2], 16).is_err());
        assert!(evaluate_field(&d, &[1.0], 0).is_err());
        let small = Arc::new(PrimeSet::sieve(2.0).unwrap());
        assert!(evaluate_field(&sample_disorder(small, 1), &[1.0], 4).is_err());
        assert!(FieldGrid::from_values(10.0, vec![1.0, 0.5], 1, vec![vec![0.0]; 2]).is_err());
    }

    #[test]
    fn variance_values() {
        let p2 = PrimeSet::sieve(2.0).unwrap();
        assert_eq!(variance_of_truncation(&p2, 2.0), 0.25);
        let p = PrimeSet::sieve(100.0).unwrap();
        let oracle: f64 = p.primes().iter().map(|&q| 0.5 / q as f64).sum();
        let v = variance_of_truncation(&p, 100.0);
        assert!((v - oracle).abs() < 1e-14);
        assert!((v - 0.90141).abs() < 1e-5, "{v}");
    }

    #[test]
    fn covariance_direct_and_tabulated() {
        let p = PrimeSet::sieve(100.0).unwrap();
        let c = covariance_truncated(0.25, 0.75, 1.0, 100.0, &p).unwrap();
        let oracle: f64 = p
            .primes()
            .iter()
            .map(|&q| (0.5 * (q as f64).ln()).cos() / (2.0 * q as f64))
            .sum();
        assert!((c - oracle).abs() < 1e-12);
        let same = covariance_truncated(0.3, 0.3, 1.0, 100.0, &p).unwrap();
        assert!((same - variance_of_truncation(&p, 100.0)).abs() < 1e-15);
        let sym = covariance_truncated(0.75, 0.25, 1.0, 100.0, &p).unwrap();
        assert_eq!(c, sym);

        let table = CovarianceTable::new(&p, &[0.5, 1.0], 64).unwrap();
        for k in [0usize, 1, 13, 63] {
            let h = k as f64 / 64.0;
            for a in [0.5, 1.0] {
                let direct = covariance_truncated(h, 0.0, a, 100.0, &p).unwrap();
                assert!((table.at(a).unwrap()[k] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlap_exact_properties() {
        let p = PrimeSet::sieve(1e6).unwrap();
        assert_eq!(overlap_exact(0.4, 0.4, 1e6, &p).unwrap(), 1.0);
        let mut rng = crate::seeds::stream(17);
        for _ in 0..100 {
            let (a, b) = (unit_f64(&mut rng), unit_f64(&mut rng));
            let small = PrimeSet::sieve(1000.0).unwrap();
            assert_eq!(
                overlap_exact(a, b, 1000.0, &small).unwrap(),
                overlap_exact(b, a, 1000.0, &small).unwrap()
            );
        }
        let far = overlap_exact(0.0, 1.0, 1e6, &p).unwrap();
        assert!(far.abs() <= 0.25, "{far}");
        assert!(overlap_exact(0.0, 1.5, 1e6, &p).is_err());
        let normalized = covariance_truncated(0.1, 0.6, 1.0, 1e6, &p).unwrap()
            / variance_of_truncation(&p, 1e6);
        assert!((normalized - overlap_exact(0.1, 0.6, 1e6, &p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn overlap_table_matches_direct() {
        let p = PrimeSet::sieve(1e5).unwrap();
        let table = OverlapTable::new(&p, 128).unwrap();
        assert_eq!(table.by_lag()[0], 1.0);
        for k in [1usize, 5, 64, 127] {
            let direct = overlap_exact(k as f64 / 128.0, 0.0, 1e5, &p).unwrap();
            assert!((table.between(k, 0) - direct).abs() < 1e-12);
            assert_eq!(table.between(3, 3 + k), table.between(3 + k, 3));
        }
    }

    #[test]
    fn asymptotic_overlap() {
        let t = 1e8f64;
        let at_scale = overlap_asymptotic(0.0, 1.0 / t.ln(), t).unwrap();
        assert!((at_scale - 1.0).abs() < 1e-12);
        assert_eq!(overlap_asymptotic(0.0, 1.0, t).unwrap(), 0.0);
        assert!(overlap_asymptotic(0.2, 0.2, t).is_err());
        assert!(overlap_asymptotic(0.2, 0.3, 10.0).is_err());
        assert_eq!(overlap_asymptotic(0.0, 1e-9, t).unwrap(), 1.0);
    }

    #[test]
    fn phase_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phases.bin");
        let p = primes_to(1000.0);
        let d = sample_disorder(p.clone(), 77);
        d.write_phase_cache(&path).unwrap();
        let back = DisorderSample::read_phase_cache(&path, p.clone(), 77).unwrap();
        assert_eq!(back.phases(), d.phases());
        assert!(DisorderSample::read_phase_cache(&path, p, 78).is_err());
    }

    #[test]
    fn default_grid() {
        assert_eq!(default_grid_size(1e8), 1024);
        assert_eq!(default_grid_size(1e40), (16.0 * 1e40f64.ln()).ceil() as usize);
    }
}
