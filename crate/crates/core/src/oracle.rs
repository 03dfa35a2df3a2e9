//! Slow reference computations used to check the fast paths.
//!
//! Nothing here shares code with the evaluators it checks: the field is summed
//! term by term, cascade functionals come from the exchangeable partition
//! probability function or from brute-force sums over replica tuples, and
//! moments come from numerical quadrature of Poisson-process identities.

use crate::field::DisorderSample;
use crate::overlap::OverlapFunctional;
use crate::primes::cutoff_for_alpha;

/// Direct double-loop evaluation of `X_{j/N}(alpha)` for each `alpha` in `alphas`.
pub fn naive_field(d: &DisorderSample, alphas: &[f64], n: usize) -> Vec<Vec<f64>> {
    let t = d.primes().limit();
    alphas
        .iter()
        .map(|&a| {
            let cutoff = cutoff_for_alpha(t, a).expect("valid alpha");
            (0..n)
                .map(|j| {
                    let h = j as f64 / n as f64;
                    d.primes()
                        .primes()
                        .iter()
                        .zip(d.phases())
                        .take_while(|(&p, _)| p as f64 <= cutoff)
                        .map(|(&p, &th)| {
                            let p = p as f64;
                            (th - h * p.ln()).cos() / p.sqrt()
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// All set partitions of `{0..s}` as label vectors.
pub fn set_partitions(s: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, s: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == s {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for label in 0..=next {
            prefix.push(label);
            grow(prefix, s, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::with_capacity(s), s, &mut out);
    out
}

/// Probability that `s` draws from a Poisson-Dirichlet(`theta`, 0) measure
/// fall on atoms according to the partition `labels`.
pub fn eppf(theta: f64, labels: &[usize]) -> f64 {
    let s = labels.len();
    let r = labels.iter().max().map_or(0, |m| m + 1);
    let mut p = 1.0;
    for i in 1..r {
        p *= theta * i as f64;
    }
    for i in 1..s {
        p /= i as f64;
    }
    for block in 0..r {
        let size = labels.iter().filter(|&&l| l == block).count();
        for j in 1..size {
            p *= j as f64 - theta;
        }
    }
    p
}

/// Exact `E mu^{x s}[phi]` for the Poisson-Dirichlet(`theta`, 0) weights.
pub fn eppf_expectation(theta: f64, phi: &OverlapFunctional) -> f64 {
    set_partitions(phi.s())
        .iter()
        .map(|labels| eppf(theta, labels) * phi.on_labels(labels))
        .sum()
}

/// `sum_{k_1..k_s} prod w_{k_l} phi(1{k_l = k_l'})` by enumerating every tuple.
pub fn tuple_sum(weights: &[f64], phi: &OverlapFunctional) -> f64 {
    fn walk(weights: &[f64], phi: &OverlapFunctional, idx: &mut Vec<usize>, s: usize) -> f64 {
        if idx.len() == s {
            return phi.on_labels(idx);
        }
        let mut total = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            idx.push(k);
            total += w * walk(weights, phi, idx, s);
            idx.pop();
        }
        total
    }
    walk(weights, phi, &mut Vec::new(), phi.s())
}

/// Trapezoid rule on `[a, b]`, exponentially accurate for the smooth,
/// rapidly decaying integrands below.
fn trapezoid(a: f64, b: f64, h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = ((b - a) / h).ceil() as usize;
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// `E sum_k xi_k^m` for Poisson-Dirichlet(`theta`, 0) weights, by quadrature.
///
/// With atoms from a Poisson process of intensity `theta x^{-theta-1} dx` and
/// total `S`, `1/S^m = int t^{m-1} e^{-tS} dt / (m-1)!` and the Mecke formula give
/// `E sum_k eta_k^m e^{-tS} = A(t) exp(-B(t))` with
/// `A(t) = int x^m e^{-tx} nu(dx)` and `B(t) = int (1 - e^{-tx}) nu(dx)`.
/// Every integral is evaluated numerically in logarithmic variables.
pub fn pd_moment_quadrature(theta: f64, m: u32) -> f64 {
    assert!(theta > 0.0 && theta < 1.0 && m >= 1);
    let h = 0.05;
    let mf = f64::from(m);
    let factorial: f64 = (1..m).map(f64::from).product();
    let outer = |w: f64| {
        let t = w.exp();
        // x = e^v, dx = x dv; the mass sits near x ~ 1/t
        let (lo, hi) = (-w - 40.0 / (1.0 - theta), -w + 40.0 / theta);
        let a = trapezoid(lo, hi, h, |v| theta * ((mf - theta) * v - t * v.exp()).exp());
        let b = trapezoid(lo, hi, h, |v| theta * -(-t * v.exp()).exp_m1() * (-theta * v).exp());
        // dt = t dw
        t.powf(mf) * a * (-b).exp()
    };
    trapezoid(-40.0 / theta, 6.0 / theta, h, outer) / factorial
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts_are_bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52, 203];
        for (s, &b) in bell.iter().enumerate() {
            assert_eq!(set_partitions(s).len(), b);
        }
    }

    #[test]
    fn eppf_sums_to_one() {
        for s in 1..=6 {
            for theta in [0.2, 0.5, 0.9] {
                let total: f64 = set_partitions(s).iter().map(|l| eppf(theta, l)).sum();
                assert!((total - 1.0).abs() < 1e-13, "s={s} theta={theta}: {total}");
            }
        }
        assert!((eppf(0.5, &[0, 0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadrature_matches_known_pair_moment() {
        // P(two draws coincide) = 1 - theta
        for theta in [0.3, 0.5, 0.7] {
            let q = pd_moment_quadrature(theta, 2);
            assert!((q - (1.0 - theta)).abs() < 1e-9, "theta={theta}: {q}");
        }
        // m = 1: the weights sum to one
        assert!((pd_moment_quadrature(0.5, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tuple_sum_small_case() {
        let w = [0.25, 0.75];
        let phi = OverlapFunctional::equality();
        assert!((tuple_sum(&w, &phi) - (0.0625 + 0.5625)).abs() < 1e-15);
    }
}
