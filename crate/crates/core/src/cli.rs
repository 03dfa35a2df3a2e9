//! The `zc` experiment driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Parser;

use crate::cascade::{sample_pd, PdBatch, PdSampler, MAX_THETA};
use crate::error::{ensure, invalid, Error, Result};
use crate::field::{default_grid_size, evaluate_field, sample_disorder};
use crate::free_energy::{
    bk_residual, derivative_at_zero, derivative_identity_gap, free_energy_curve, second_derivative_variance_check,
};
use crate::gibbs::{log_log, overlap_functional_field, two_overlap_histogram, FieldEnsemble, BETA_C};
use crate::harness::{compare_field_vs_cascade, gg_residual_field, subcritical_report};
use crate::overlap::{OverlapFunctional, Psi, MAX_REPLICAS};
use crate::primes::{cutoff_for_alpha, PrimeSet, MAX_LIMIT};
use crate::report::{fmt_num, Cell, Table};
use crate::seeds::{derive_seed, Role};
use crate::verify::{Scale, Suite, DEFAULT_SEED};

pub const SUBCOMMANDS: [&str; 14] = [
    "sieve-stats",
    "field-eval",
    "two-overlap",
    "overlap-functional",
    "free-energy-curve",
    "derivative-check",
    "bk-residual",
    "gg-field",
    "pd-sample",
    "pd-moments",
    "gg-pd",
    "compare",
    "subcritical",
    "verify",
];

/// Command-line flags; every one may also come from `--config`.
#[derive(Debug, Default, Parser)]
#[command(name = "zc", version, allow_negative_numbers = true, about = "Gibbs measures of a random model of zeta on short intervals")]
pub struct Flags {
    /// One of the experiment subcommands.
    pub subcommand: String,
    #[arg(long = "T")]
    pub t: Option<f64>,
    /// Comma-separated list of T values.
    #[arg(long = "T-list")]
    pub t_list: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// PD parameter; defaults to 2 / beta.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<u32>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "n-disorder")]
    pub n_disorder: Option<usize>,
    #[arg(long = "n-draws")]
    pub n_draws: Option<usize>,
    #[arg(long = "n-pd-samples")]
    pub n_pd_samples: Option<usize>,
    #[arg(long = "tail-tol")]
    pub tail_tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "grid-n")]
    pub grid_n: Option<usize>,
    /// `default` or a comma-separated list.
    #[arg(long = "u-grid", allow_hyphen_values = true)]
    pub u_grid: Option<String>,
    /// all-equal | equality | high-band | low-band | all-pairs-high | constant:V | table:v0,v1,...
    #[arg(long)]
    pub phi: Option<String>,
    /// integral | table:A,B | constant:C
    #[arg(long)]
    pub psi: Option<String>,
    /// fast | full
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// csv | json
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long = "prime-cache")]
    pub prime_cache: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub subcommand: String,
    pub t: f64,
    pub t_list: Vec<f64>,
    pub beta: f64,
    pub alpha: f64,
    pub theta: Option<f64>,
    pub s: usize,
    pub k: usize,
    pub m: u32,
    pub eps: f64,
    pub n_disorder: usize,
    pub n_draws: usize,
    pub n_pd_samples: usize,
    pub tail_tol: f64,
    pub seed: u64,
    pub grid_n: Option<usize>,
    pub u_grid: Vec<f64>,
    pub phi: String,
    pub psi: String,
    pub suite: String,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub prime_cache: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// 41 evenly spaced points on `[-0.8, 1]`.
pub fn default_u_grid() -> Vec<f64> {
    (0..41).map(|i| -0.8 + 0.045 * i as f64).map(|u: f64| (u * 1e12).round() / 1e12).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            subcommand: String::new(),
            t: 1e6,
            t_list: vec![1e4, 1e6, 1e8],
            beta: 4.0,
            alpha: 0.5,
            theta: None,
            s: 2,
            k: 1,
            m: 2,
            eps: 0.2,
            n_disorder: 64,
            n_draws: 10_000,
            n_pd_samples: 10_000,
            tail_tol: crate::cascade::DEFAULT_TAIL_TOL,
            seed: DEFAULT_SEED,
            grid_n: None,
            u_grid: default_u_grid(),
            phi: "all-equal".into(),
            psi: "integral".into(),
            suite: "fast".into(),
            output: None,
            format: Format::Csv,
            prime_cache: None,
            threads: None,
        }
    }
}

fn parse_f64(name: &'static str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| invalid(name, format!("not a number: {v:?}")))
}

fn parse_usize(name: &'static str, v: &str) -> Result<usize> {
    let x = parse_f64(name, v)?;
    ensure(x >= 0.0 && x.fract() == 0.0 && x < 1e15, name, || format!("not a count: {v:?}"))?;
    Ok(x as usize)
}

fn parse_list(name: &'static str, v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_f64(name, s)).collect()
}

fn parse_u_grid(v: &str) -> Result<Vec<f64>> {
    if v.trim() == "default" {
        Ok(default_u_grid())
    } else {
        parse_list("u-grid", v)
    }
}

fn parse_format(v: &str) -> Result<Format> {
    match v.trim() {
        "csv" => Ok(Format::Csv),
        "json" => Ok(Format::Json),
        other => Err(invalid("format", format!("expected csv or json, got {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting; keys match the long flag names.
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('_', "-").as_str() {
            "T" => self.t = parse_f64("T", v)?,
            "T-list" => self.t_list = parse_list("T-list", v)?,
            "beta" => self.beta = parse_f64("beta", v)?,
            "alpha" => self.alpha = parse_f64("alpha", v)?,
            "theta" => self.theta = Some(parse_f64("theta", v)?),
            "s" => self.s = parse_usize("s", v)?,
            "k" => self.k = parse_usize("k", v)?,
            "m" => self.m = parse_usize("m", v)? as u32,
            "eps" => self.eps = parse_f64("eps", v)?,
            "n-disorder" => self.n_disorder = parse_usize("n-disorder", v)?,
            "n-draws" => self.n_draws = parse_usize("n-draws", v)?,
            "n-pd-samples" => self.n_pd_samples = parse_usize("n-pd-samples", v)?,
            "tail-tol" => self.tail_tol = parse_f64("tail-tol", v)?,
            "seed" => self.seed = v.parse().map_err(|_| invalid("seed", format!("not an integer: {v:?}")))?,
            "grid-n" => self.grid_n = Some(parse_usize("grid-n", v)?),
            "u-grid" => self.u_grid = parse_u_grid(v)?,
            "phi" => self.phi = v.into(),
            "psi" => self.psi = v.into(),
            "suite" => self.suite = v.into(),
            "output" => self.output = Some(v.into()),
            "format" => self.format = parse_format(v)?,
            "prime-cache" => self.prime_cache = Some(v.into()),
            "threads" => self.threads = Some(parse_usize("threads", v)?),
            other => return Err(invalid("config", format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            context: format!("reading config {}", path.display()),
            source,
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key, value).map_err(|e| Error::Config {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = Self {
            subcommand: flags.subcommand.clone(),
            ..Self::default()
        };
        if let Some(path) = &flags.config {
            cfg.apply_file(path)?;
        }
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &flags.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        take!(t);
        take!(beta);
        take!(alpha);
        take!(s);
        take!(k);
        take!(m);
        take!(eps);
        take!(n_disorder);
        take!(n_draws);
        take!(n_pd_samples);
        take!(tail_tol);
        take!(seed);
        take!(phi);
        take!(psi);
        take!(suite);
        if let Some(v) = flags.theta {
            cfg.theta = Some(v);
        }
        if let Some(v) = flags.grid_n {
            cfg.grid_n = Some(v);
        }
        if let Some(v) = &flags.output {
            cfg.output = Some(v.clone());
        }
        if let Some(v) = &flags.prime_cache {
            cfg.prime_cache = Some(v.clone());
        }
        if let Some(v) = flags.threads {
            cfg.threads = Some(v);
        }
        if let Some(v) = &flags.t_list {
            cfg.t_list = parse_list("T-list", v)?;
        }
        if let Some(v) = &flags.u_grid {
            cfg.u_grid = parse_u_grid(v)?;
        }
        if let Some(v) = &flags.format {
            cfg.format = parse_format(v)?;
        }
        Ok(cfg)
    }

    /// PD parameter: `--theta` or `2 / beta`.
    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or(BETA_C / self.beta)
    }

    fn grid_for(&self, t: f64) -> usize {
        self.grid_n.unwrap_or_else(|| default_grid_size(t))
    }

    /// Settings embedded in every artifact.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[f64]| v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("subcommand", self.subcommand.clone()),
            ("version", env!("CARGO_PKG_VERSION").to_string()),
            ("T", fmt_num(self.t)),
            ("T-list", list(&self.t_list)),
            ("beta", fmt_num(self.beta)),
            ("alpha", fmt_num(self.alpha)),
            ("theta", fmt_num(self.theta())),
            ("s", self.s.to_string()),
            ("k", self.k.to_string()),
            ("m", self.m.to_string()),
            ("eps", fmt_num(self.eps)),
            ("n-disorder", self.n_disorder.to_string()),
            ("n-draws", self.n_draws.to_string()),
            ("n-pd-samples", self.n_pd_samples.to_string()),
            ("tail-tol", fmt_num(self.tail_tol)),
            ("seed", self.seed.to_string()),
            ("grid-n", self.grid_n.map_or("auto".into(), |n| n.to_string())),
            ("u-grid", list(&self.u_grid)),
            ("phi", self.phi.clone()),
            ("psi", self.psi.clone()),
        ];
        if self.subcommand == "verify" {
            out.push(("suite", self.suite.clone()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Checks every parameter the subcommand will use before any work starts.
    pub fn validate(&self) -> Result<()> {
        let sub = self.subcommand.as_str();
        ensure(SUBCOMMANDS.contains(&sub), "subcommand", String::new)
            .map_err(|_| Error::UnknownSubcommand(sub.to_string()))?;
        let check_t = |name: &'static str, t: f64| {
            ensure(t > std::f64::consts::E.exp() && t <= MAX_LIMIT, name, || {
                format!("T must lie in (e^e, {MAX_LIMIT:e}], got {t}")
            })
        };
        ensure(self.beta > 0.0 && self.beta.is_finite(), "beta", || format!("must be positive, got {}", self.beta))?;
        ensure((0.0..=1.0).contains(&self.alpha), "alpha", || format!("must lie in [0, 1], got {}", self.alpha))?;
        ensure(self.eps > 0.0 && self.eps < 0.5, "eps", || format!("must lie in (0, 1/2), got {}", self.eps))?;
        ensure((1..=MAX_REPLICAS).contains(&self.s), "s", || format!("must lie in 1..={MAX_REPLICAS}, got {}", self.s))?;
        ensure(self.k >= 1 && self.k <= self.s, "k", || format!("must lie in 1..={}, got {}", self.s, self.k))?;
        ensure(self.n_disorder >= 2, "n-disorder", || format!("need at least 2, got {}", self.n_disorder))?;
        ensure(self.n_draws >= 1, "n-draws", || "need at least one draw".into())?;
        ensure(self.n_pd_samples >= 2, "n-pd-samples", || format!("need at least 2, got {}", self.n_pd_samples))?;
        ensure(self.tail_tol > 0.0 && self.tail_tol < 1.0, "tail-tol", || format!("must lie in (0, 1), got {}", self.tail_tol))?;
        ensure(self.grid_n.is_none_or(|n| n >= 1), "grid-n", || "grid needs at least one point".into())?;
        ensure(self.threads.is_none_or(|n| n >= 1), "threads", || "need at least one worker".into())?;
        let field_t = matches!(
            sub,
            "sieve-stats" | "field-eval" | "two-overlap" | "overlap-functional" | "free-energy-curve"
                | "derivative-check" | "bk-residual" | "gg-field"
        );
        if field_t {
            check_t("T", self.t)?;
        }
        if matches!(sub, "compare" | "subcritical") {
            ensure(!self.t_list.is_empty(), "T-list", || "empty".into())?;
            for &t in &self.t_list {
                check_t("T-list", t)?;
            }
        }
        if matches!(sub, "free-energy-curve" | "gg-field" | "compare") {
            ensure(self.beta > BETA_C, "beta", || format!("{sub} needs beta > {BETA_C}, got {}", self.beta))?;
        }
        if sub == "gg-field" {
            ensure(self.alpha > 0.0 && self.alpha < 1.0, "alpha", || format!("must lie in (0, 1), got {}", self.alpha))?;
        }
        if sub == "subcritical" {
            ensure(self.beta < BETA_C, "beta", || format!("subcritical needs beta < {BETA_C}, got {}", self.beta))?;
        }
        if sub == "free-energy-curve" {
            ensure(!self.u_grid.is_empty() && self.u_grid.iter().all(|&u| u > -1.0), "u-grid", || {
                "needs points above -1".into()
            })?;
        }
        if matches!(sub, "pd-sample" | "pd-moments" | "gg-pd") {
            let th = self.theta();
            ensure(th > 0.0 && th <= MAX_THETA, "theta", || format!("must lie in (0, {MAX_THETA}], got {th}"))?;
        }
        if sub == "pd-moments" {
            ensure(self.m >= 1 && self.m <= 7, "m", || format!("must lie in 1..=7, got {}", self.m))?;
        }
        if sub == "verify" {
            ensure(matches!(self.suite.as_str(), "fast" | "full"), "suite", || {
                format!("expected fast or full, got {:?}", self.suite)
            })?;
        }
        if matches!(sub, "overlap-functional" | "bk-residual" | "gg-field" | "gg-pd" | "compare" | "subcritical") {
            self.phi()?;
        }
        if matches!(sub, "gg-field" | "gg-pd") {
            self.psi()?;
        }
        Ok(())
    }

    /// The test function named by `--phi`, acting on `s` replicas.
    pub fn phi(&self) -> Result<OverlapFunctional> {
        let s = self.s;
        let spec = self.phi.trim();
        let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let pairwise = |name: &str| {
            ensure(s == 2, "phi", || format!("{name} acts on two replicas; use --s 2"))
        };
        match kind {
            "all-equal" => OverlapFunctional::all_equal(s),
            "equality" => {
                pairwise(kind)?;
                Ok(OverlapFunctional::equality())
            }
            "high-band" => {
                pairwise(kind)?;
                Ok(OverlapFunctional::high_band(self.eps))
            }
            "low-band" => {
                pairwise(kind)?;
                Ok(OverlapFunctional::low_band(self.eps))
            }
            "all-pairs-high" => Ok(OverlapFunctional::all_pairs_high(s, self.eps)),
            "constant" => Ok(OverlapFunctional::constant(s, parse_f64("phi", arg)?)),
            "table" => OverlapFunctional::tabulated(s, parse_list("phi", arg)?),
            _ => Err(invalid("phi", format!("unknown test function {spec:?}"))),
        }
    }

    pub fn psi(&self) -> Result<Psi> {
        let spec = self.psi.trim();
        let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
        match kind {
            "integral" => Ok(Psi::TruncatedIntegral { alpha: self.alpha }),
            "constant" => {
                let c = parse_f64("psi", arg)?;
                Ok(Psi::Table { at_zero: c, at_one: c })
            }
            "table" => match parse_list("psi", arg)?.as_slice() {
                [a, b] => Ok(Psi::Table { at_zero: *a, at_one: *b }),
                _ => Err(invalid("psi", "table needs two values: at 0 and at 1")),
            },
            _ => Err(invalid("psi", format!("unknown overlap function {spec:?}"))),
        }
    }
}

/// The table a subcommand produced, plus lines meant for the terminal.
pub struct Artifact {
    pub table: Table,
    pub messages: Vec<String>,
    /// Whether every verdict in the artifact passed.
    pub ok: bool,
}

impl Artifact {
    fn table(table: Table) -> Self {
        Self {
            table,
            messages: Vec::new(),
            ok: true,
        }
    }

    pub fn render(&self, cfg: &ExperimentConfig) -> String {
        match cfg.format {
            Format::Csv => self.table.to_csv(&cfg.pairs()),
            Format::Json => self.table.to_json(&cfg.pairs()),
        }
    }
}

fn primes(cfg: &ExperimentConfig, t: f64) -> Result<Arc<PrimeSet>> {
    Ok(Arc::new(PrimeSet::load_or_sieve(t, cfg.prime_cache.as_deref())?))
}

fn ensemble(cfg: &ExperimentConfig, t: f64) -> Result<FieldEnsemble> {
    FieldEnsemble::build(primes(cfg, t)?, &[cfg.alpha], cfg.grid_for(t), cfg.n_disorder, cfg.seed)
}

fn ensembles(cfg: &ExperimentConfig) -> Result<Vec<FieldEnsemble>> {
    let top = cfg.t_list.iter().copied().fold(0.0, f64::max);
    let all = primes(cfg, top)?;
    cfg.t_list
        .iter()
        .map(|&t| {
            FieldEnsemble::build(Arc::new(all.prefix(t)?), &[cfg.alpha], cfg.grid_for(t), cfg.n_disorder, cfg.seed)
        })
        .collect()
}

const STAT_COLUMNS: [&str; 8] = ["T", "beta", "statistic", "estimate", "stderr", "n_disorder", "n_draws", "seed_base"];

fn stat_row(cfg: &ExperimentConfig, t: f64, statistic: &str, estimate: f64, stderr: f64) -> Vec<Cell> {
    vec![
        t.into(),
        cfg.beta.into(),
        statistic.into(),
        estimate.into(),
        stderr.into(),
        cfg.n_disorder.into(),
        cfg.n_draws.into(),
        Cell::Text(cfg.seed.to_string()),
    ]
}

const CASCADE_COLUMNS: [&str; 5] = ["theta", "statistic", "estimate", "stderr", "n_samples"];

/// Runs a validated configuration.
pub fn run(cfg: &ExperimentConfig) -> Result<Artifact> {
    cfg.validate()?;
    let t = cfg.t;
    match cfg.subcommand.as_str() {
        "sieve-stats" => {
            let set = primes(cfg, t)?;
            let mut table = Table::new(&["T", "alpha", "cutoff", "prime_count", "variance"]);
            let mut alphas = vec![0.0, 0.25, cfg.alpha, 0.5, 0.75, 1.0];
            alphas.sort_by(f64::total_cmp);
            alphas.dedup();
            for a in alphas {
                let cutoff = cutoff_for_alpha(t, a)?;
                let var = crate::field::variance_of_truncation(&set, cutoff);
                table.push(vec![t.into(), a.into(), cutoff.into(), set.count_le(cutoff).into(), var.into()]);
            }
            Ok(Artifact::table(table))
        }
        "field-eval" => {
            let d = sample_disorder(primes(cfg, t)?, derive_seed(cfg.seed, Role::Disorder, 0));
            let grid = evaluate_field(&d, &[cfg.alpha, 1.0], cfg.grid_for(t))?;
            let mut table = Table::new(&["h", "alpha", "value"]);
            for (a, row) in grid.alphas().iter().zip(grid.rows()) {
                for (j, v) in row.iter().enumerate() {
                    table.push(vec![grid.h(j).into(), (*a).into(), (*v).into()]);
                }
            }
            Ok(Artifact::table(table))
        }
        "two-overlap" => {
            let ens = ensemble(cfg, t)?;
            let h = two_overlap_histogram(&ens, cfg.beta, cfg.eps, cfg.n_draws)?;
            let mut table = Table::new(&STAT_COLUMNS);
            for (name, e) in [("low_band", h.low), ("middle_band", h.middle), ("high_band", h.high)] {
                table.push(stat_row(cfg, t, name, e.mean, e.stderr));
            }
            Ok(Artifact::table(table))
        }
        "overlap-functional" => {
            let ens = ensemble(cfg, t)?;
            let f = overlap_functional_field(&ens, cfg.beta, &cfg.phi()?, cfg.eps, cfg.n_draws)?;
            let mut table = Table::new(&STAT_COLUMNS);
            table.push(stat_row(cfg, t, "functional", f.estimate.mean, f.estimate.stderr));
            table.push(stat_row(cfg, t, "exclusion_rate", f.exclusion_rate, 0.0));
            Ok(Artifact::table(table))
        }
        "free-energy-curve" => {
            let ens = ensemble(cfg, t)?;
            let curve = free_energy_curve(&ens, cfg.alpha, cfg.beta, &cfg.u_grid)?;
            let mut table = Table::new(&["T", "alpha", "beta", "u", "f_finite_mean", "f_finite_stderr", "f_limit", "branch_id"]);
            for p in curve {
                table.push(vec![
                    t.into(),
                    cfg.alpha.into(),
                    cfg.beta.into(),
                    p.u.into(),
                    p.finite.mean.into(),
                    p.finite.stderr.into(),
                    p.limit.into(),
                    Cell::Int(p.branch as i64),
                ]);
            }
            Ok(Artifact::table(table))
        }
        "derivative-check" => {
            let ens = ensemble(cfg, t)?;
            let grid = &ens.grids()[0];
            let first = derivative_at_zero(grid, cfg.alpha, cfg.beta, 1e-3)?;
            let second = second_derivative_variance_check(grid, cfg.alpha, cfg.beta, 0.0, 1e-3)?;
            let gap = derivative_identity_gap(&ens, cfg.alpha, cfg.beta, cfg.n_draws)?;
            let mut table = Table::new(&STAT_COLUMNS);
            table.push(stat_row(cfg, t, "f_prime_gibbs", first.analytic, 0.0));
            table.push(stat_row(cfg, t, "f_prime_difference", first.numeric, 0.0));
            table.push(stat_row(cfg, t, "gibbs_variance", second.analytic, 0.0));
            table.push(stat_row(cfg, t, "scaled_f_second_difference", second.numeric, 0.0));
            table.push(stat_row(cfg, t, "derivative_identity_gap", gap.mean, gap.stderr));
            Ok(Artifact::table(table))
        }
        "bk-residual" => {
            let ens = ensemble(cfg, t)?;
            let r = bk_residual(&ens, cfg.alpha, cfg.beta, cfg.s, cfg.k, &cfg.phi()?, cfg.n_draws)?;
            let ll = log_log(t)?;
            let mut table = Table::new(&STAT_COLUMNS);
            table.push(stat_row(cfg, t, "bk_residual", r.mean, r.stderr));
            table.push(stat_row(cfg, t, "bk_residual_times_loglog", r.mean * ll, r.stderr * ll));
            Ok(Artifact::table(table))
        }
        "gg-field" => {
            let ens = ensemble(cfg, t)?;
            let r = gg_residual_field(&ens, cfg.beta, cfg.alpha, cfg.s, cfg.k, Some(cfg.psi()?), &cfg.phi()?, cfg.n_draws)?;
            let mut table = Table::new(&STAT_COLUMNS);
            table.push(stat_row(cfg, t, "gg_residual", r.mean, r.stderr));
            Ok(Artifact::table(table))
        }
        "pd-sample" => {
            let theta = cfg.theta();
            let w = sample_pd(theta, derive_seed(cfg.seed, Role::Cascade, 0), cfg.tail_tol)?;
            let mut table = Table::new(&["theta", "rank", "weight"]);
            for (i, x) in w.weights().iter().enumerate() {
                table.push(vec![theta.into(), (i + 1).into(), (*x).into()]);
            }
            table.push(vec![theta.into(), "tail".into(), w.tail_mass_bound().into()]);
            let mut a = Artifact::table(table);
            a.messages.push(format!(
                "{} atoms, tail mass bound {:.3e}{}",
                w.weights().len(),
                w.tail_mass_bound(),
                if w.capped() { " (atom cap reached)" } else { "" }
            ));
            Ok(a)
        }
        "pd-moments" => {
            let theta = cfg.theta();
            let batch = PdBatch::sample(&PdSampler::new(theta, cfg.tail_tol)?, cfg.n_pd_samples, cfg.seed, cfg.m as usize)?;
            let mut table = Table::new(&CASCADE_COLUMNS);
            for m in 1..=cfg.m {
                let e = batch.moment(m as usize)?;
                let name = format!("power_sum_{m}");
                table.push(vec![theta.into(), name.as_str().into(), e.mean.into(), e.stderr.into(), batch.len().into()]);
                let exact = crate::cascade::pd_moment_exact(theta, m);
                table.push(vec![theta.into(), format!("{name}_exact").into(), exact.into(), 0.0.into(), batch.len().into()]);
            }
            Ok(Artifact::table(table))
        }
        "gg-pd" => {
            let theta = cfg.theta();
            let batch =
                PdBatch::sample(&PdSampler::new(theta, cfg.tail_tol)?, cfg.n_pd_samples, cfg.seed, cfg.s + 1)?;
            let r = batch.gg_residual(cfg.s, cfg.k, cfg.psi()?, &cfg.phi()?)?;
            let mut table = Table::new(&CASCADE_COLUMNS);
            table.push(vec![theta.into(), "gg_residual".into(), r.mean.into(), r.stderr.into(), batch.len().into()]);
            Ok(Artifact::table(table))
        }
        "compare" => {
            let ens = ensembles(cfg)?;
            let refs: Vec<&FieldEnsemble> = ens.iter().collect();
            let rep = compare_field_vs_cascade(&refs, cfg.beta, &cfg.phi()?, cfg.eps, cfg.n_draws, cfg.n_pd_samples, cfg.seed)?;
            let mut table = Table::new(&["source", "T", "beta", "theta", "estimate", "stderr", "gap", "exclusion_rate"]);
            for row in &rep.rows {
                table.push(vec![
                    "field".into(),
                    row.t.into(),
                    rep.beta.into(),
                    rep.theta.into(),
                    row.field.mean.into(),
                    row.field.stderr.into(),
                    row.gap.into(),
                    row.exclusion_rate.into(),
                ]);
            }
            table.push(vec![
                "cascade".into(),
                "limit".into(),
                rep.beta.into(),
                rep.theta.into(),
                rep.cascade.mean.into(),
                rep.cascade.stderr.into(),
                0.0.into(),
                0.0.into(),
            ]);
            Ok(Artifact::table(table))
        }
        "subcritical" => {
            let ens = ensembles(cfg)?;
            let refs: Vec<&FieldEnsemble> = ens.iter().collect();
            let rep = subcritical_report(&refs, cfg.beta, &cfg.phi()?, cfg.eps, cfg.n_draws)?;
            let mut table = Table::new(&STAT_COLUMNS);
            for row in &rep.rows {
                table.push(stat_row(cfg, row.t, "low_band", row.low_band.mean, row.low_band.stderr));
                table.push(stat_row(cfg, row.t, "functional", row.functional.mean, row.functional.stderr));
                table.push(stat_row(cfg, row.t, "functional_target", rep.functional_target, 0.0));
                table.push(stat_row(cfg, row.t, "exclusion_rate", row.exclusion_rate, 0.0));
            }
            Ok(Artifact::table(table))
        }
        "verify" => {
            let scale = if cfg.suite == "full" { Scale::acceptance() } else { Scale::smoke() };
            let suite = Suite::new(scale, cfg.seed).with_prime_cache(cfg.prime_cache.clone());
            let mut table = Table::new(&["criterion", "name", "passed", "elapsed_s", "detail"]);
            let mut messages = Vec::new();
            let mut ok = true;
            for o in suite.run_all() {
                messages.push(o.line());
                ok &= o.passed;
                table.push(vec![
                    Cell::Int(i64::from(o.id)),
                    o.name.into(),
                    (if o.passed { "true" } else { "false" }).into(),
                    o.elapsed_s.into(),
                    o.detail.clone().into(),
                ]);
            }
            if cfg.suite == "full" {
                for (name, v) in suite.diagnostics()? {
                    messages.push(format!("diagnostic {name} = {}", fmt_num(v)));
                    table.push(vec![Cell::Int(0), name.into(), "n/a".into(), 0.0.into(), fmt_num(v).into()]);
                }
            }
            Ok(Artifact { table, messages, ok })
        }
        other => Err(Error::UnknownSubcommand(other.to_string())),
    }
}

/// Worker count: `ZC_THREADS`, else `--threads`, else one per core.
fn configure_threads(cfg: &ExperimentConfig) -> Result<()> {
    let from_env = std::env::var("ZC_THREADS")
        .ok()
        .map(|v| parse_usize("ZC_THREADS", &v))
        .transpose()?;
    if let Some(n) = from_env.or(cfg.threads) {
        ensure(n >= 1, "threads", || "need at least one worker".into())?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn write_output(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    match &cfg.output {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            context: format!("writing {}", path.display()),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let flags = match Flags::try_parse_from(args) {
        Ok(f) => f,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = ExperimentConfig::resolve(&flags).and_then(|cfg| {
        cfg.validate()?;
        configure_threads(&cfg)?;
        let artifact = run(&cfg)?;
        let mut log = String::new();
        for m in &artifact.messages {
            let _ = writeln!(log, "{m}");
        }
        eprint!("{log}");
        write_output(&cfg, &artifact.render(&cfg))?;
        Ok(artifact.ok)
    });
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("zc: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(args: &[&str]) -> Result<ExperimentConfig> {
        let mut v = vec!["zc".to_string()];
        v.extend(args.iter().map(|s| s.to_string()));
        ExperimentConfig::resolve(&Flags::try_parse_from(v).unwrap())
    }

    #[test]
    fn default_u_grid_shape() {
        let g = default_u_grid();
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], -0.8);
        assert_eq!(g[40], 1.0);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nbeta = 3\nT = 1e5\nn_draws = 50 # trailing\n").unwrap();
        let c = cfg(&["two-overlap", "--config", path.to_str().unwrap(), "--beta", "5"]).unwrap();
        assert_eq!(c.beta, 5.0);
        assert_eq!(c.t, 1e5);
        assert_eq!(c.n_draws, 50);
        std::fs::write(&path, "bogus = 1\n").unwrap();
        let err = cfg(&["two-overlap", "--config", path.to_str().unwrap()]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn validation_happens_before_work() {
        assert!(matches!(cfg(&["nope"]).unwrap().validate(), Err(Error::UnknownSubcommand(_))));
        assert!(cfg(&["two-overlap", "--T", "5"]).unwrap().validate().is_err());
        assert!(cfg(&["subcritical", "--beta", "4"]).unwrap().validate().is_err());
        assert!(cfg(&["gg-field", "--beta", "1.5"]).unwrap().validate().is_err());
        assert!(cfg(&["pd-moments", "--beta", "2"]).unwrap().validate().is_err());
        assert!(cfg(&["gg-pd", "--s", "3", "--k", "4"]).unwrap().validate().is_err());
        assert!(cfg(&["overlap-functional", "--s", "3", "--phi", "equality"]).unwrap().validate().is_err());
        assert!(cfg(&["verify", "--suite", "slow"]).unwrap().validate().is_err());
        assert!(cfg(&["pd-moments", "--beta", "4", "--m", "3"]).unwrap().validate().is_ok());
    }

    #[test]
    fn phi_and_psi_specs() {
        let c = cfg(&["gg-pd", "--s", "2", "--phi", "table:0.5,-1", "--psi", "table:0,1"]).unwrap();
        assert_eq!(c.phi().unwrap().on_bits(1), -1.0);
        assert_eq!(c.psi().unwrap(), Psi::Table { at_zero: 0.0, at_one: 1.0 });
        let c = cfg(&["gg-pd", "--s", "2", "--phi", "table:1,2,3"]).unwrap();
        assert!(c.phi().is_err());
    }

    #[test]
    fn limit_column_in_curve() {
        let c = cfg(&["free-energy-curve", "--T", "1e4", "--beta", "3", "--n-disorder", "2", "--grid-n", "64", "--u-grid", "-0.5,0,0.5"]).unwrap();
        let out = run(&c).unwrap().render(&c);
        let at_zero = out
            .lines()
            .find(|l| l.starts_with("10000,0.5,3,0,"))
            .expect("row at u = 0");
        assert!(at_zero.ends_with(",2,3"), "{at_zero}");
    }
}
