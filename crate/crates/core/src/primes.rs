//! Prime sets indexing the field, and the truncation cutoffs `exp((log T)^alpha)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Largest supported sieve bound.
pub const MAX_LIMIT: f64 = 1e9;

/// Odd numbers covered by one sieve segment.
const SEGMENT_ODDS: u64 = 1 << 18;

/// All primes up to an inclusive real bound, in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimeSet {
    limit: f64,
    primes: Vec<u64>,
}

impl PrimeSet {
    /// Segmented sieve of Eratosthenes over `[2, floor(limit)]`.
    pub fn sieve(limit: f64) -> Result<Self> {
        ensure(limit >= 0.0, "limit", || format!("must be nonnegative, got {limit}"))?;
        ensure(limit <= MAX_LIMIT, "limit", || {
            format!("sieving beyond {MAX_LIMIT:e} is not supported, got {limit:e}")
        })?;
        Ok(Self {
            limit,
            primes: segmented_sieve(limit.floor() as u64),
        })
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn primes(&self) -> &[u64] {
        &self.primes
    }

    pub fn len(&self) -> usize {
        self.primes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primes.is_empty()
    }

    /// Number of primes `p` with `p <= x`, compared in real arithmetic.
    pub fn count_le(&self, x: f64) -> usize {
        self.primes.partition_point(|&p| (p as f64) <= x)
    }

    /// The primes up to `limit`, which must not exceed this set's own limit.
    pub fn prefix(&self, limit: f64) -> Result<Self> {
        ensure(limit >= 0.0 && limit <= self.limit, "limit", || {
            format!("prefix bound {limit} outside [0, {}]", self.limit)
        })?;
        Ok(Self {
            limit,
            primes: self.primes[..self.count_le(limit)].to_vec(),
        })
    }

    /// Writes the cache format: little-endian `u64` words, the first holding
    /// `floor(limit)`, followed by the primes.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            context: format!("writing prime cache {}", path.display()),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(&(self.limit.floor() as u64).to_le_bytes()).map_err(io)?;
        for p in &self.primes {
            out.write_all(&p.to_le_bytes()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadCache {
            path: path.to_path_buf(),
            reason,
        };
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|source| Error::Io {
                context: format!("reading prime cache {}", path.display()),
                source,
            })?;
        if bytes.len() < 8 || bytes.len() % 8 != 0 {
            return Err(bad(format!("length {} is not a positive multiple of 8", bytes.len())));
        }
        let mut words = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let limit = words.next().expect("header present");
        let primes: Vec<u64> = words.collect();
        if primes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("primes are not strictly increasing".into()));
        }
        if primes.last().is_some_and(|&p| p > limit) {
            return Err(bad(format!("prime exceeds header limit {limit}")));
        }
        Ok(Self {
            limit: limit as f64,
            primes,
        })
    }

    /// Loads primes up to `limit` from `cache` when it covers the bound,
    /// otherwise sieves and (re)writes the cache.
    pub fn load_or_sieve(limit: f64, cache: Option<&Path>) -> Result<Self> {
        if let Some(path) = cache {
            if path.exists() {
                let cached = Self::read_cache(path)?;
                if cached.limit >= limit.floor() {
                    let mut set = cached.prefix(limit.floor())?;
                    set.limit = limit;
                    return Ok(set);
                }
            }
            let set = Self::sieve(limit)?;
            set.write_cache(path)?;
            return Ok(set);
        }
        Self::sieve(limit)
    }
}

/// Truncation cutoff `exp((log T)^alpha)`.
pub fn cutoff_for_alpha(t: f64, alpha: f64) -> Result<f64> {
    ensure(t > std::f64::consts::E, "T", || {
        format!("must exceed e so that log log T > 0, got {t}")
    })?;
    ensure((0.0..=1.0).contains(&alpha), "alpha", || {
        format!("must lie in [0, 1], got {alpha}")
    })?;
    // exp(ln T) can land one ulp below T and drop a prime at T itself.
    if alpha == 1.0 {
        return Ok(t);
    }
    Ok(t.ln().powf(alpha).exp())
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Odd primes up to `n` by a plain sieve.
fn small_odd_primes(n: u64) -> Vec<u64> {
    if n < 3 {
        return Vec::new();
    }
    let n = n as usize;
    let mut composite = vec![false; n + 1];
    let mut out = Vec::new();
    for i in (3..=n).step_by(2) {
        if composite[i] {
            continue;
        }
        out.push(i as u64);
        let mut j = i * i;
        while j <= n {
            composite[j] = true;
            j += 2 * i;
        }
    }
    out
}

fn segmented_sieve(n: u64) -> Vec<u64> {
    if n < 2 {
        return Vec::new();
    }
    let mut primes = vec![2];
    let base = small_odd_primes(isqrt(n));
    let mut is_prime = vec![true; SEGMENT_ODDS as usize];
    // Segment holds the odd numbers lo, lo + 2, ..., below hi.
    let mut lo = 3u64;
    while lo <= n {
        let hi = (lo + 2 * SEGMENT_ODDS).min(n + 1);
        let len = (hi - lo).div_ceil(2) as usize;
        is_prime[..len].fill(true);
        for &p in &base {
            if p * p >= hi {
                break;
            }
            let mut start = (p * p).max(lo.div_ceil(p) * p);
            if start % 2 == 0 {
                start += p;
            }
            let mut j = ((start - lo) / 2) as usize;
            while j < len {
                is_prime[j] = false;
                j += p as usize;
            }
        }
        primes.extend(
            is_prime[..len]
                .iter()
                .enumerate()
                .filter(|(_, &keep)| keep)
                .map(|(j, _)| lo + 2 * j as u64),
        );
        lo = hi;
    }
    primes
}
