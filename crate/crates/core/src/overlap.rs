//! Overlap matrices of `s` replicas and the test functions applied to them.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use crate::error::{ensure, Result};
use crate::seeds::unit_f64;

/// Largest replica count accepted by tabulated functionals.
pub const MAX_REPLICAS: usize = 6;

/// Number of off-diagonal pairs `s (s - 1) / 2`.
pub fn pair_count(s: usize) -> usize {
    s * s.saturating_sub(1) / 2
}

/// Position of pair `(l, l2)`, `l < l2`, in the row-major upper triangle.
pub fn pair_index(s: usize, l: usize, l2: usize) -> usize {
    debug_assert!(l < l2 && l2 < s);
    l * (2 * s - l - 1) / 2 + (l2 - l - 1)
}

/// Symmetric `s x s` matrix with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMatrix {
    s: usize,
    entries: Vec<f64>,
}

impl OverlapMatrix {
    /// Fills the upper triangle from `f(l, l2)`, `l < l2`, and mirrors it.
    pub fn from_fn(s: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; s * s];
        for l in 0..s {
            entries[l * s + l] = 1.0;
            for l2 in l + 1..s {
                let v = f(l, l2);
                entries[l * s + l2] = v;
                entries[l2 * s + l] = v;
            }
        }
        Self { s, entries }
    }

    /// Equality overlaps `1{labels[l] == labels[l2]}`.
    pub fn from_labels(labels: &[usize]) -> Self {
        Self::from_fn(labels.len(), |l, l2| f64::from(u8::from(labels[l] == labels[l2])))
    }

    /// Binary matrix whose pair `b` is set iff bit `b` of `bits` is.
    pub fn from_bits(s: usize, bits: u64) -> Self {
        Self::from_fn(s, |l, l2| ((bits >> pair_index(s, l, l2)) & 1) as f64)
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn get(&self, l: usize, l2: usize) -> f64 {
        self.entries[l * self.s + l2]
    }

    /// Upper-triangle entries in pair order.
    pub fn upper(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.s).flat_map(move |l| (l + 1..self.s).map(move |l2| self.get(l, l2)))
    }

    /// Sub-matrix of the first `s` replicas.
    pub fn leading(&self, s: usize) -> Self {
        Self::from_fn(s, |l, l2| self.get(l, l2))
    }

    /// For 0/1 matrices: equality is transitive (`R12 = R13 = 1` implies `R23 = 1`).
    pub fn is_ultrametric_binary(&self) -> bool {
        let s = self.s;
        (0..s).all(|a| {
            (0..s).all(|b| {
                (0..s).all(|c| !(self.get(a, b) == 1.0 && self.get(a, c) == 1.0) || self.get(b, c) == 1.0)
            })
        })
    }
}

/// How real overlaps are mapped onto the binary domain of a tabulated functional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rounding {
    /// `<= eps` to 0, `>= 1 - eps` to 1; anything in between excludes the draw.
    Band(f64),
    /// Threshold at one half.
    Nearest,
}

impl Rounding {
    fn bit(self, rho: f64) -> Option<bool> {
        match self {
            Rounding::Band(eps) if rho <= eps => Some(false),
            Rounding::Band(eps) if rho >= 1.0 - eps => Some(true),
            Rounding::Band(_) => None,
            Rounding::Nearest => Some(rho >= 0.5),
        }
    }
}

type MatrixFn = dyn Fn(&OverlapMatrix) -> f64 + Send + Sync;

/// Bounded test function `phi` of the overlaps of `s` replicas.
#[derive(Clone)]
pub enum OverlapFunctional {
    Constant {
        s: usize,
        value: f64,
    },
    /// Values on all `2^{s(s-1)/2}` binary matrices, indexed by the bit
    /// pattern of the upper triangle in pair order.
    Tabulated {
        s: usize,
        table: Vec<f64>,
    },
    /// Defined directly on real overlap matrices.
    Callable {
        s: usize,
        name: String,
        bound: f64,
        f: Arc<MatrixFn>,
    },
}

impl fmt::Debug for OverlapFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { s, value } => write!(f, "Constant(s={s}, {value})"),
            Self::Tabulated { s, table } => write!(f, "Tabulated(s={s}, {table:?})"),
            Self::Callable { s, name, .. } => write!(f, "Callable(s={s}, {name})"),
        }
    }
}

impl OverlapFunctional {
    pub fn constant(s: usize, value: f64) -> Self {
        Self::Constant { s, value }
    }

    pub fn tabulated(s: usize, table: Vec<f64>) -> Result<Self> {
        ensure((1..=MAX_REPLICAS).contains(&s), "s", || {
            format!("tabulated functionals support 1..={MAX_REPLICAS} replicas, got {s}")
        })?;
        ensure(table.len() == 1 << pair_count(s), "table", || {
            format!("s = {s} needs {} entries, got {}", 1u64 << pair_count(s), table.len())
        })?;
        ensure(table.iter().all(|v| v.is_finite()), "table", || "entries must be finite".into())?;
        Ok(Self::Tabulated { s, table })
    }

    pub fn callable(
        s: usize,
        name: impl Into<String>,
        bound: f64,
        f: impl Fn(&OverlapMatrix) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::Callable {
            s,
            name: name.into(),
            bound,
            f: Arc::new(f),
        }
    }

    /// `1{R12 = 1}` on two replicas.
    pub fn equality() -> Self {
        Self::Tabulated {
            s: 2,
            table: vec![0.0, 1.0],
        }
    }

    /// Indicator that all `s` replicas coincide.
    pub fn all_equal(s: usize) -> Result<Self> {
        let mut table = vec![0.0; 1 << pair_count(s)];
        *table.last_mut().expect("nonempty table") = 1.0;
        Self::tabulated(s, table)
    }

    /// `1{rho12 > 1 - eps}` on real overlaps.
    pub fn high_band(eps: f64) -> Self {
        Self::callable(2, format!("high_band({eps})"), 1.0, move |m| {
            f64::from(u8::from(m.get(0, 1) > 1.0 - eps))
        })
    }

    /// `1{rho12 < eps}` on real overlaps.
    pub fn low_band(eps: f64) -> Self {
        Self::callable(2, format!("low_band({eps})"), 1.0, move |m| {
            f64::from(u8::from(m.get(0, 1) < eps))
        })
    }

    /// Product of high-band indicators over every pair of `s` replicas.
    pub fn all_pairs_high(s: usize, eps: f64) -> Self {
        Self::callable(s, format!("all_pairs_high({eps})"), 1.0, move |m| {
            f64::from(u8::from(m.upper().all(|r| r > 1.0 - eps)))
        })
    }

    /// Tabulated functional with i.i.d. uniform entries in `[-1, 1]`.
    pub fn random_tabulated(s: usize, rng: &mut impl RngCore) -> Result<Self> {
        let table = (0..1usize << pair_count(s))
            .map(|_| 2.0 * unit_f64(rng) - 1.0)
            .collect();
        Self::tabulated(s, table)
    }

    pub fn s(&self) -> usize {
        match self {
            Self::Constant { s, .. } | Self::Tabulated { s, .. } | Self::Callable { s, .. } => *s,
        }
    }

    /// Sup norm, used to validate boundedness.
    pub fn bound(&self) -> f64 {
        match self {
            Self::Constant { value, .. } => value.abs(),
            Self::Tabulated { table, .. } => table.iter().fold(0.0, |m, v| m.max(v.abs())),
            Self::Callable { bound, .. } => *bound,
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Self::Constant { value, .. } => Some(*value),
            _ => None,
        }
    }

    /// Value on the binary matrix encoded by `bits`.
    pub fn on_bits(&self, bits: u64) -> f64 {
        match self {
            Self::Constant { value, .. } => *value,
            Self::Tabulated { table, .. } => table[bits as usize],
            Self::Callable { s, f, .. } => f(&OverlapMatrix::from_bits(*s, bits)),
        }
    }

    /// Value on the equality matrix of `labels` (replica `l` sits on atom `labels[l]`).
    pub fn on_labels(&self, labels: &[usize]) -> f64 {
        match self {
            Self::Constant { value, .. } => *value,
            _ => self.on_bits(label_bits(labels)),
        }
    }

    /// `phi(I_s)`: all replicas distinct.
    pub fn at_identity(&self) -> f64 {
        self.on_bits(0)
    }

    /// Value on real overlaps. Tabulated functionals see the rounded matrix
    /// and return `None` when band rounding excludes an entry.
    pub fn on_real(&self, m: &OverlapMatrix, rounding: Rounding) -> Option<f64> {
        match self {
            Self::Constant { value, .. } => Some(*value),
            Self::Callable { f, .. } => Some(f(m)),
            Self::Tabulated { table, .. } => {
                let mut bits = 0usize;
                for (b, rho) in m.upper().enumerate() {
                    if rounding.bit(rho)? {
                        bits |= 1 << b;
                    }
                }
                Some(table[bits])
            }
        }
    }

    /// `phi'(R) = phi((R_{perm(l), perm(l2)}))`, a relabelling of replica slots.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let s = self.s();
        assert_eq!(perm.len(), s, "permutation length must equal s");
        match self {
            Self::Constant { .. } => self.clone(),
            Self::Tabulated { table, .. } => {
                let permuted = (0..table.len() as u64)
                    .map(|bits| {
                        let m = OverlapMatrix::from_bits(s, bits);
                        let src = matrix_bits(&OverlapMatrix::from_fn(s, |l, l2| m.get(perm[l], perm[l2])));
                        table[src as usize]
                    })
                    .collect();
                Self::Tabulated { s, table: permuted }
            }
            Self::Callable { name, bound, f, .. } => {
                let (f, perm) = (f.clone(), perm.to_vec());
                Self::callable(s, format!("{name}∘perm"), *bound, move |m| {
                    f(&OverlapMatrix::from_fn(m.s(), |l, l2| m.get(perm[l], perm[l2])))
                })
            }
        }
    }
}

fn matrix_bits(m: &OverlapMatrix) -> u64 {
    m.upper()
        .enumerate()
        .fold(0, |acc, (b, v)| if v == 1.0 { acc | (1 << b) } else { acc })
}

/// Bit pattern of the equality matrix of `labels`.
pub fn label_bits(labels: &[usize]) -> u64 {
    let s = labels.len();
    let mut bits = 0u64;
    for l in 0..s {
        for l2 in l + 1..s {
            if labels[l] == labels[l2] {
                bits |= 1 << pair_index(s, l, l2);
            }
        }
    }
    bits
}

/// Single-overlap test function `psi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psi {
    /// Values at overlap 0 and 1, extended linearly in between.
    Table { at_zero: f64, at_one: f64 },
    /// `int_0^alpha 1{y < rho} dy = min(max(rho, 0), alpha)`.
    TruncatedIntegral { alpha: f64 },
}

impl Psi {
    pub fn on_real(self, rho: f64) -> f64 {
        match self {
            Psi::Table { at_zero, at_one } => at_zero + (at_one - at_zero) * rho.clamp(0.0, 1.0),
            Psi::TruncatedIntegral { alpha } => rho.max(0.0).min(alpha),
        }
    }

    pub fn on_bit(self, equal: bool) -> f64 {
        self.on_real(if equal { 1.0 } else { 0.0 })
    }

    pub fn is_constant(self) -> bool {
        matches!(self, Psi::Table { at_zero, at_one } if at_zero == at_one)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_indexing_is_row_major() {
        let s = 4;
        let mut expected = 0;
        for l in 0..s {
            for l2 in l + 1..s {
                assert_eq!(pair_index(s, l, l2), expected);
                expected += 1;
            }
        }
        assert_eq!(expected, pair_count(s));
    }

    #[test]
    fn matrices_are_symmetric_with_unit_diagonal() {
        let m = OverlapMatrix::from_fn(4, |l, l2| (l * 10 + l2) as f64 / 100.0);
        for l in 0..4 {
            assert_eq!(m.get(l, l), 1.0);
            for l2 in 0..4 {
                assert_eq!(m.get(l, l2), m.get(l2, l));
            }
        }
        let labels = OverlapMatrix::from_labels(&[0, 1, 0, 2]);
        assert!(labels.is_ultrametric_binary());
        assert_eq!(OverlapMatrix::from_bits(4, label_bits(&[0, 1, 0, 2])), labels);
        let broken = OverlapMatrix::from_fn(3, |l, l2| if (l, l2) == (1, 2) { 0.0 } else { 1.0 });
        assert!(!broken.is_ultrametric_binary());
    }

    #[test]
    fn band_rounding_excludes_middle() {
        let phi = OverlapFunctional::equality();
        let m = |r| OverlapMatrix::from_fn(2, move |_, _| r);
        assert_eq!(phi.on_real(&m(0.9), Rounding::Band(0.2)), Some(1.0));
        assert_eq!(phi.on_real(&m(-0.1), Rounding::Band(0.2)), Some(0.0));
        assert_eq!(phi.on_real(&m(0.5), Rounding::Band(0.2)), None);
        assert_eq!(phi.on_real(&m(0.5), Rounding::Nearest), Some(1.0));
        assert_eq!(phi.at_identity(), 0.0);
    }

    #[test]
    fn tabulated_validation() {
        assert!(OverlapFunctional::tabulated(3, vec![0.0; 7]).is_err());
        assert!(OverlapFunctional::tabulated(3, vec![0.0; 8]).is_ok());
        assert!(OverlapFunctional::tabulated(1, vec![2.0]).is_ok());
        assert!(OverlapFunctional::tabulated(7, vec![0.0; 1 << 21]).is_err());
    }

    #[test]
    fn permutation_relabels_slots() {
        let mut rng = crate::seeds::stream(5);
        let phi = OverlapFunctional::random_tabulated(3, &mut rng).unwrap();
        let perm = [2, 0, 1];
        let permuted = phi.permuted(&perm);
        for labels in [[0, 0, 1], [0, 1, 1], [0, 1, 0], [0, 1, 2], [0, 0, 0]] {
            let moved: Vec<usize> = (0..3).map(|l| labels[perm[l]]).collect();
            assert_eq!(permuted.on_labels(&labels), phi.on_labels(&moved));
        }
        let identity = phi.permuted(&[0, 1, 2]);
        for bits in 0..8 {
            assert_eq!(identity.on_bits(bits), phi.on_bits(bits));
        }
    }

    #[test]
    fn psi_forms() {
        let integral = Psi::TruncatedIntegral { alpha: 0.5 };
        assert_eq!(integral.on_real(-0.2), 0.0);
        assert_eq!(integral.on_real(0.3), 0.3);
        assert_eq!(integral.on_real(0.9), 0.5);
        assert_eq!(integral.on_bit(true), 0.5);
        let table = Psi::Table { at_zero: -1.0, at_one: 3.0 };
        assert_eq!(table.on_bit(false), -1.0);
        assert_eq!(table.on_bit(true), 3.0);
        assert!(Psi::Table { at_zero: 2.0, at_one: 2.0 }.is_constant());
    }
}
