//! The acceptance battery, shared by `zc verify` and the acceptance tests.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::cascade::{pd_moment_exact, PdBatch, PdSampler, DEFAULT_TAIL_TOL};
use crate::error::{ensure, Result};
use crate::estimate::McEstimate;
use crate::field::{default_grid_size, evaluate_field, sample_disorder, FieldGrid};
use crate::free_energy::{
    bk_residual, derivative_at_zero, derivative_identity_gap, free_energy_curve, limiting_free_energy,
    second_derivative_variance_check, LimitParams,
};
use crate::gibbs::{concentration_stat, two_overlap_histogram, FieldEnsemble, GibbsWeights};
use crate::harness::{compare_field_vs_cascade, gg_residual_field, is_nondecreasing, is_nonincreasing, subcritical_report};
use crate::oracle::{eppf_expectation, naive_field, pd_moment_quadrature};
use crate::overlap::{OverlapFunctional, Psi};
use crate::primes::PrimeSet;
use crate::seeds::{derive_seed, stream, unit_f64, Role};

pub const DEFAULT_SEED: u64 = 20_240_917;
pub const CRITERIA: [u8; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Sizes of every experiment in the battery.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scale {
    pub t_list: Vec<f64>,
    pub n_disorder: usize,
    pub n_draws: usize,
    /// `None` selects [`default_grid_size`].
    pub grid_n: Option<usize>,
    pub pd_moment_samples: usize,
    pub pd_battery_samples: usize,
    pub battery_pairs: usize,
    pub derivative_t: f64,
    pub oracle_prime_limit: f64,
    pub oracle_grid_n: usize,
    pub eps: f64,
}

impl Scale {
    /// The stated acceptance sizes.
    pub fn acceptance() -> Self {
        Self {
            t_list: vec![1e4, 1e6, 1e8],
            n_disorder: 64,
            n_draws: 10_000,
            grid_n: None,
            pd_moment_samples: 10_000,
            pd_battery_samples: 10_000,
            battery_pairs: 20,
            derivative_t: 1e6,
            oracle_prime_limit: 1e4,
            oracle_grid_n: 4096,
            eps: 0.2,
        }
    }

    /// A few seconds of work touching every code path.
    pub fn smoke() -> Self {
        Self {
            t_list: vec![1e4, 3e4, 1e5],
            n_disorder: 4,
            n_draws: 200,
            grid_n: Some(256),
            pd_moment_samples: 100,
            pd_battery_samples: 100,
            battery_pairs: 2,
            derivative_t: 1e5,
            oracle_prime_limit: 2e3,
            oracle_grid_n: 512,
            eps: 0.2,
        }
    }
}

/// Verdict of one criterion.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_s: f64,
    /// Wall-clock budget after scaling to the available cores.
    pub limit_s: Option<f64>,
    /// Every statistic computed, in a fixed order.
    pub values: Vec<(String, f64)>,
}

impl Outcome {
    pub fn line(&self) -> String {
        let limit = self.limit_s.map_or(String::new(), |l| format!(" / {l:.0}s"));
        format!(
            "criterion {:>2} [{}] {}: {} ({:.1}s{limit})",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed_s,
        )
    }
}

/// Budgets are stated for eight workers; with fewer cores they stretch proportionally.
pub fn time_scale() -> f64 {
    let cores = rayon::current_num_threads().max(1) as f64;
    (8.0 / cores).max(1.0)
}

struct Collector {
    values: Vec<(String, f64)>,
}

impl Collector {
    fn new() -> Self {
        Self { values: Vec::new() }
    }

    fn put(&mut self, name: impl Into<String>, v: f64) {
        self.values.push((name.into(), v));
    }

    fn est(&mut self, name: &str, e: McEstimate) {
        self.put(format!("{name}.mean"), e.mean);
        self.put(format!("{name}.stderr"), e.stderr);
    }
}

/// Runs criteria with shared, lazily built field ensembles.
pub struct Suite {
    scale: Scale,
    seed: u64,
    prime_cache: Option<PathBuf>,
    pd_normalizer_scale: f64,
    primes: Mutex<Option<Arc<PrimeSet>>>,
    ensembles: Mutex<BTreeMap<u64, Arc<FieldEnsemble>>>,
}

impl Suite {
    pub fn new(scale: Scale, seed: u64) -> Self {
        Self {
            scale,
            seed,
            prime_cache: None,
            pd_normalizer_scale: 1.0,
            primes: Mutex::new(None),
            ensembles: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_prime_cache(mut self, path: Option<PathBuf>) -> Self {
        self.prime_cache = path;
        self
    }

    /// Runs the cascade criteria with a deliberately mis-normalized sampler.
    #[doc(hidden)]
    pub fn with_pd_normalizer_scale(mut self, scale: f64) -> Self {
        self.pd_normalizer_scale = scale;
        self
    }

    pub fn scale(&self) -> &Scale {
        &self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn all_primes(&self) -> Result<Arc<PrimeSet>> {
        let mut slot = self.primes.lock().expect("prime lock");
        if let Some(p) = slot.as_ref() {
            return Ok(p.clone());
        }
        let top = self
            .scale
            .t_list
            .iter()
            .copied()
            .chain([self.scale.derivative_t, self.scale.oracle_prime_limit])
            .fold(0.0, f64::max);
        let p = Arc::new(PrimeSet::load_or_sieve(top, self.prime_cache.as_deref())?);
        *slot = Some(p.clone());
        Ok(p)
    }

    fn primes_to(&self, t: f64) -> Result<Arc<PrimeSet>> {
        Ok(Arc::new(self.all_primes()?.prefix(t)?))
    }

    fn grid_n(&self, t: f64) -> usize {
        self.scale.grid_n.unwrap_or_else(|| default_grid_size(t))
    }

    /// Field ensemble at `T`, shared by every criterion that needs it.
    pub fn ensemble(&self, t: f64) -> Result<Arc<FieldEnsemble>> {
        if let Some(e) = self.ensembles.lock().expect("ensemble lock").get(&t.to_bits()) {
            return Ok(e.clone());
        }
        let ens = Arc::new(FieldEnsemble::build(
            self.primes_to(t)?,
            &[0.5],
            self.grid_n(t),
            self.scale.n_disorder,
            self.seed,
        )?);
        self.ensembles.lock().expect("ensemble lock").insert(t.to_bits(), ens.clone());
        Ok(ens)
    }

    fn ensembles(&self) -> Result<Vec<Arc<FieldEnsemble>>> {
        self.scale.t_list.iter().map(|&t| self.ensemble(t)).collect()
    }

    fn pd_sampler(&self, theta: f64) -> Result<PdSampler> {
        Ok(PdSampler::new(theta, DEFAULT_TAIL_TOL)?.with_normalizer_scale(self.pd_normalizer_scale))
    }

    /// Runs one criterion; computation errors become failures with the message as detail.
    pub fn run(&self, id: u8) -> Outcome {
        let start = Instant::now();
        let mut c = Collector::new();
        let (name, limit, result): (&'static str, Option<f64>, Result<(bool, String)>) = match id {
            1 => ("PD pair moment", Some(10.0), self.pd_moment(2, &mut c)),
            2 => ("PD triple moment", Some(10.0), self.pd_moment(3, &mut c)),
            3 => ("GG identities on the cascade", Some(120.0), self.gg_battery(&mut c)),
            4 => ("limiting free energy", Some(1.0), self.limit_continuity(&mut c)),
            5 => ("derivative identities", Some(60.0), self.derivatives(&mut c)),
            6 => ("two-overlap trend", Some(1200.0), self.two_overlap_trend(&mut c)),
            7 => ("GG field trend", Some(1200.0), self.gg_field_trend(&mut c)),
            8 => ("subcritical low band", Some(600.0), self.subcritical(&mut c)),
            9 => ("oracle equivalence", Some(30.0), self.oracles(&mut c)),
            10 => ("determinism across worker counts", None, self.determinism(&mut c)),
            _ => ("unknown", None, Err(crate::error::invalid("criterion", format!("no criterion {id}")))),
        };
        let elapsed = start.elapsed();
        let limit_s = limit.map(|l| l * time_scale());
        let (ok, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        let in_time = limit_s.is_none_or(|l| elapsed <= Duration::from_secs_f64(l));
        Outcome {
            id,
            name,
            passed: ok && in_time,
            detail: if in_time { detail } else { format!("{detail}; over time budget") },
            elapsed_s: elapsed.as_secs_f64(),
            limit_s,
            values: c.values,
        }
    }

    pub fn run_all(&self) -> Vec<Outcome> {
        CRITERIA.iter().map(|&id| self.run(id)).collect()
    }

    fn pd_moment(&self, m: u32, c: &mut Collector) -> Result<(bool, String)> {
        let batch = PdBatch::sample(&self.pd_sampler(0.5)?, self.scale.pd_moment_samples, self.seed, m as usize)?;
        let est = batch.moment(m as usize)?;
        let exact = pd_moment_exact(0.5, m);
        c.est(&format!("pd_moment_{m}"), est);
        let mut ok = (est.mean - exact).abs() <= 3.0 * est.stderr;
        let mut detail = format!(
            "E P_{m} = {:.5} +- {:.5}, exact {exact}, z = {:.2}, capped {}/{}",
            est.mean,
            est.stderr,
            (est.mean - exact) / est.stderr,
            batch.n_capped(),
            batch.len()
        );
        if m == 3 {
            let quad = pd_moment_quadrature(0.5, 3);
            let eppf = eppf_expectation(0.5, &OverlapFunctional::all_equal(3)?);
            c.put("pd_moment_3.quadrature", quad);
            c.put("pd_moment_3.eppf", eppf);
            let confirmed = (quad - exact).abs() < 1e-8 && (eppf - exact).abs() < 1e-12;
            ok &= confirmed;
            detail.push_str(&format!("; quadrature {quad:.12}, partition probabilities {eppf:.12}"));
        }
        Ok((ok, detail))
    }

    fn gg_battery(&self, c: &mut Collector) -> Result<(bool, String)> {
        let batch = PdBatch::sample(&self.pd_sampler(0.5)?, self.scale.pd_battery_samples, self.seed, 5)?;
        let (mut total, mut failed, mut worst_z, mut worst_const) = (0, 0, 0.0f64, 0.0f64);
        for s in 1..=4usize {
            let mut rng = stream(derive_seed(self.seed, Role::Battery, s as u64));
            let pairs = (0..self.scale.battery_pairs)
                .map(|_| {
                    let psi = Psi::Table {
                        at_zero: 2.0 * unit_f64(&mut rng) - 1.0,
                        at_one: 2.0 * unit_f64(&mut rng) - 1.0,
                    };
                    Ok((psi, OverlapFunctional::random_tabulated(s, &mut rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let constant = Psi::Table { at_zero: 0.3, at_one: 0.3 };
            for k in 1..=s {
                for (i, (psi, phi)) in pairs.iter().enumerate() {
                    let r = batch.gg_residual(s, k, *psi, phi)?;
                    c.est(&format!("gg_pd.s{s}.k{k}.pair{i}"), r);
                    let z = if r.stderr > 0.0 { r.mean / r.stderr } else { f64::INFINITY };
                    worst_z = worst_z.max(z);
                    total += 1;
                    if r.mean > 3.0 * r.stderr {
                        failed += 1;
                    }
                }
                let r = batch.gg_residual(s, k, constant, &pairs[0].1)?;
                c.put(format!("gg_pd.s{s}.k{k}.constant"), r.mean);
                worst_const = worst_const.max(r.mean);
            }
        }
        let ok = failed == 0 && worst_const <= 1e-14;
        Ok((
            ok,
            format!(
                "{failed}/{total} residuals beyond 3 stderr (max z {worst_z:.2}); constant psi max {worst_const:.1e}; capped {}/{}",
                batch.n_capped(),
                batch.len()
            ),
        ))
    }

    fn limit_continuity(&self, c: &mut Collector) -> Result<(bool, String)> {
        let alpha = 0.5;
        let mut worst: f64 = 0.0;
        let us: Vec<f64> = (0..200).map(|i| -0.995 + 2.0 * i as f64 / 199.0).collect();
        let betas: Vec<f64> = (0..200).map(|i| 2.001 + 6.0 * i as f64 / 199.0).collect();
        for (i, &u) in us.iter().enumerate() {
            for (j, &beta) in betas.iter().enumerate() {
                let here = limiting_free_energy(LimitParams { alpha, beta, u })?;
                // compare with the right and upper neighbours across any branch change
                for (u2, b2) in [(us.get(i + 1), Some(&beta)), (Some(&u), betas.get(j + 1))] {
                    let (Some(&u2), Some(&b2)) = (u2, b2) else { continue };
                    let there = limiting_free_energy(LimitParams { alpha, beta: b2, u: u2 })?;
                    if here.1 != there.1 {
                        worst = worst.max(boundary_jump(alpha, (u, beta), (u2, b2))?);
                    }
                }
            }
        }
        c.put("limit.max_jump", worst);
        let mut exact = true;
        for beta in [2.5, 3.0, 4.0, 8.0] {
            let (f, _) = limiting_free_energy(LimitParams { alpha, beta, u: 0.0 })?;
            c.put(format!("limit.u0.beta{beta}"), f);
            exact &= f == beta - 1.0;
        }
        Ok((worst < 1e-10 && exact, format!("max jump at branch boundaries {worst:.2e}; f(0) = beta - 1 exactly: {exact}")))
    }

    fn derivatives(&self, c: &mut Collector) -> Result<(bool, String)> {
        let t = self.scale.derivative_t;
        let grid = single_grid(self.primes_to(t)?, self.grid_n(t), derive_seed(self.seed, Role::Disorder, 0))?;
        let first = derivative_at_zero(&grid, 0.5, 4.0, 1e-3)?;
        let second = second_derivative_variance_check(&grid, 0.5, 4.0, 0.0, 1e-3)?;
        c.put("derivative.first.analytic", first.analytic);
        c.put("derivative.first.numeric", first.numeric);
        c.put("derivative.second.variance", second.analytic);
        c.put("derivative.second.numeric", second.numeric);
        let ok = first.relative_error() < 1e-3 && second.relative_error() < 0.01;
        Ok((
            ok,
            format!(
                "f'(0) relative error {:.2e}; f'' vs Gibbs variance relative error {:.2e}",
                first.relative_error(),
                second.relative_error()
            ),
        ))
    }

    fn two_overlap_trend(&self, c: &mut Collector) -> Result<(bool, String)> {
        let mut middle = Vec::new();
        let mut ends = Vec::new();
        for ens in self.ensembles()? {
            let h = two_overlap_histogram(&ens, 4.0, self.scale.eps, self.scale.n_draws)?;
            let tag = format!("two_overlap.T{:e}", ens.t());
            c.est(&format!("{tag}.low"), h.low);
            c.est(&format!("{tag}.middle"), h.middle);
            c.est(&format!("{tag}.high"), h.high);
            middle.push(h.middle);
            ends.push((h.low.mean, h.high.mean));
        }
        let trend = is_nonincreasing(&middle);
        let (first, last) = (ends[0], ends[ends.len() - 1]);
        let toward = (last.0 - 0.5).abs() < (first.0 - 0.5).abs() && (last.1 - 0.5).abs() < (first.1 - 0.5).abs();
        Ok((
            trend && toward,
            format!(
                "middle {}; (low, high) {:.3},{:.3} -> {:.3},{:.3}; nonincreasing {trend}, toward (0.5, 0.5) {toward}",
                fmt_series(&middle),
                first.0,
                first.1,
                last.0,
                last.1
            ),
        ))
    }

    fn gg_field_trend(&self, c: &mut Collector) -> Result<(bool, String)> {
        let phi = OverlapFunctional::high_band(self.scale.eps);
        let mut res = Vec::new();
        for ens in self.ensembles()? {
            let r = gg_residual_field(&ens, 4.0, 0.5, 2, 1, None, &phi, self.scale.n_draws)?;
            c.est(&format!("gg_field.T{:e}", ens.t()), r);
            res.push(r);
        }
        let ok = is_nonincreasing(&res);
        Ok((ok, format!("residual {}; nonincreasing {ok}", fmt_series(&res))))
    }

    fn subcritical(&self, c: &mut Collector) -> Result<(bool, String)> {
        let mut low = Vec::new();
        for ens in self.ensembles()? {
            let h = two_overlap_histogram(&ens, 1.0, self.scale.eps, self.scale.n_draws)?;
            c.est(&format!("subcritical.T{:e}.low", ens.t()), h.low);
            low.push(h.low);
        }
        let last = low[low.len() - 1].mean;
        let rising = is_nondecreasing(&low);
        Ok((
            last > 0.9 && rising,
            format!("low-band mass {}; final > 0.9 {}, increasing {rising}", fmt_series(&low), last > 0.9),
        ))
    }

    fn oracles(&self, c: &mut Collector) -> Result<(bool, String)> {
        let primes = self.primes_to(self.scale.oracle_prime_limit)?;
        let d = sample_disorder(primes, derive_seed(self.seed, Role::Disorder, 0));
        let n = self.scale.oracle_grid_n;
        let fast = evaluate_field(&d, &[0.5, 1.0], n)?;
        let slow = naive_field(&d, &[0.5, 1.0], n);
        let field_err = fast
            .rows()
            .iter()
            .zip(&slow)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        let mut rng = stream(derive_seed(self.seed, Role::Battery, 99));
        let mut mass_err: f64 = 0.0;
        for _ in 0..100 {
            let e: Vec<f64> = (0..n).map(|_| 2e3 * unit_f64(&mut rng) - 1e3).collect();
            let w = GibbsWeights::from_exponents(&e)?;
            mass_err = mass_err.max((w.weights().iter().sum::<f64>() - 1.0).abs());
        }
        c.put("oracle.field_max_abs_diff", field_err);
        c.put("oracle.gibbs_mass_err", mass_err);
        Ok((
            field_err < 1e-9 && mass_err < 1e-12,
            format!("phasor vs direct sum {field_err:.2e}; Gibbs mass error {mass_err:.2e}"),
        ))
    }

    /// Reruns the statistics of criteria 1-9 at smoke scale on one worker and on three.
    fn determinism(&self, c: &mut Collector) -> Result<(bool, String)> {
        let collect = |threads: usize| -> Result<Vec<(String, f64)>> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| crate::error::invalid("threads", e.to_string()))?;
            pool.install(|| {
                let suite = Suite::new(Scale::smoke(), self.seed).with_pd_normalizer_scale(self.pd_normalizer_scale);
                Ok(CRITERIA[..9].iter().flat_map(|&id| suite.run(id).values).collect())
            })
        };
        let (a, b) = (collect(1)?, collect(3)?);
        ensure(!a.is_empty(), "statistics", || "nothing was computed".into())?;
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits());
        c.put("determinism.statistics", a.len() as f64);
        Ok((same, format!("{} statistics, bit-identical on 1 and 3 workers: {same}", a.len())))
    }

    /// Measured quantities reported by the full suite without a verdict.
    pub fn diagnostics(&self) -> Result<Vec<(String, f64)>> {
        let mut c = Collector::new();
        let ensembles = self.ensembles()?;
        let refs: Vec<&FieldEnsemble> = ensembles.iter().map(|e| e.as_ref()).collect();
        let n_draws = self.scale.n_draws;
        let eps = self.scale.eps;
        for (name, phi) in [
            ("equality", OverlapFunctional::equality()),
            ("all_equal3", OverlapFunctional::all_equal(3)?),
        ] {
            let rep = compare_field_vs_cascade(&refs, 4.0, &phi, eps, n_draws, self.scale.pd_moment_samples, self.seed)?;
            c.est(&format!("compare.{name}.cascade"), rep.cascade);
            for row in rep.rows {
                c.est(&format!("compare.{name}.T{:e}.field", row.t), row.field);
                c.put(format!("compare.{name}.T{:e}.exclusion", row.t), row.exclusion_rate);
            }
        }
        let phi = OverlapFunctional::high_band(eps);
        for ens in &refs {
            let tag = format!("T{:e}", ens.t());
            let gap = derivative_identity_gap(ens, 0.5, 4.0, n_draws)?;
            c.est(&format!("derivative_gap.{tag}"), gap);
            let bk = bk_residual(ens, 0.5, 4.0, 2, 1, &phi, n_draws)?;
            c.est(&format!("bk.{tag}"), bk);
            c.put(format!("bk_times_loglog.{tag}"), bk.mean * ens.log_log());
            let conc = concentration_stat(ens, 0.5, 4.0, 2, 1, &phi, n_draws)?;
            c.est(&format!("concentration.{tag}"), conc);
        }
        let sub = subcritical_report(&refs, 1.0, &OverlapFunctional::all_equal(3)?, eps, n_draws)?;
        for row in sub.rows {
            c.est(&format!("subcritical.all_equal3.T{:e}", row.t), row.functional);
        }
        let last = refs[refs.len() - 1];
        let curve = free_energy_curve(last, 0.5, 4.0, &[-0.5, 0.0, 0.5])?;
        for p in curve {
            c.put(format!("free_energy.u{}.finite", p.u), p.finite.mean);
            c.put(format!("free_energy.u{}.limit", p.u), p.limit);
        }
        Ok(c.values)
    }
}

fn single_grid(primes: Arc<PrimeSet>, n: usize, seed: u64) -> Result<FieldGrid> {
    evaluate_field(&sample_disorder(primes, seed), &[0.5, 1.0], n)
}

/// Largest disagreement of the one-sided branch formulas on the boundary
/// crossed between two neighbouring lattice points.
fn boundary_jump(alpha: f64, a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    let quad = |beta: f64, v: f64| beta * beta * v / 4.0;
    let frozen = |beta: f64, v: f64| beta * v.sqrt() - 1.0;
    let linear = |beta: f64, u: f64| beta * (alpha * u + 1.0) - 1.0;
    let v_of = |u: f64| LimitParams { alpha, beta: 3.0, u }.v();
    let mut jump: f64 = 0.0;
    if (a.0 < 0.0) != (b.0 < 0.0) {
        // the u = 0 boundary at either beta
        for beta in [a.1, b.1] {
            let v = v_of(0.0);
            let left = if beta < 2.0 / v.sqrt() { quad(beta, v) } else { frozen(beta, v) };
            jump = jump.max((left - linear(beta, 0.0)).abs());
        }
    }
    for u in [a.0, b.0].into_iter().filter(|&u| u < 0.0) {
        let v = v_of(u);
        let star = 2.0 / v.sqrt();
        jump = jump.max((quad(star, v) - frozen(star, v)).abs());
    }
    ensure(jump.is_finite(), "jump", || "non-finite boundary value".into())?;
    Ok(jump)
}

fn fmt_series(points: &[McEstimate]) -> String {
    points
        .iter()
        .map(|p| format!("{:.4}+-{:.4}", p.mean, p.stderr))
        .collect::<Vec<_>>()
        .join(" -> ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_suite_runs_every_criterion() {
        let suite = Suite::new(Scale::smoke(), 1);
        for id in [1, 2, 4, 9] {
            let o = suite.run(id);
            assert!(!o.values.is_empty(), "{}", o.line());
            assert!(!o.detail.starts_with("error"), "{}", o.line());
        }
        assert!(suite.run(4).passed);
        assert!(!suite.run(42).passed);
    }
}
