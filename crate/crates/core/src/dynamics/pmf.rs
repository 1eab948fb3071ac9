//! Exact probability mass functions over integer counts: binomials,
//! multinomials over count vectors, and their convolutions.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};

/// A finite distribution over count objects (vectors or matrices).
#[derive(Debug, Clone)]
pub struct CountDistribution<K> {
    pub support: Vec<K>,
    pub probs: Vec<f64>,
}

impl<K> CountDistribution<K> {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, f64)> {
        self.support.iter().zip(self.probs.iter().copied())
    }
}

/// Joint state-action counts, `counts[x][u]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointCounts {
    pub counts: Vec<Vec<u32>>,
}

impl JointCounts {
    pub fn total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }

    /// State marginal counts.
    pub fn state_marginal(&self) -> Vec<u32> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }
}

fn ln_factorials(upto: usize) -> Vec<f64> {
    static TABLE: OnceLock<Mutex<Vec<f64>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| Mutex::new(vec![0.0]));
    let mut t = table.lock().unwrap();
    while t.len() <= upto {
        let k = t.len();
        let last = t[k - 1];
        t.push(last + (k as f64).ln());
    }
    t[..=upto].to_vec()
}

/// Clamp a success probability into [0,1]. Tolerates the small excursions
/// produced by rounding and by boundary probes of the fixed-point solver.
fn clamp_prob(p: f64) -> f64 {
    debug_assert!(
        (-1e-4..=1.0 + 1e-4).contains(&p),
        "probability {p} far outside [0,1]"
    );
    p.clamp(0.0, 1.0)
}

/// Binomial pmf over `0..=trials`, computed in log space for stability.
pub fn binomial_pmf(trials: u32, p: f64) -> Vec<f64> {
    let p = clamp_prob(p);
    let k = trials as usize;
    if p == 0.0 {
        let mut v = vec![0.0; k + 1];
        v[0] = 1.0;
        return v;
    }
    if p == 1.0 {
        let mut v = vec![0.0; k + 1];
        v[k] = 1.0;
        return v;
    }
    let lf = ln_factorials(k);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    (0..=k)
        .map(|j| {
            let ln = lf[k] - lf[j] - lf[k - j] + j as f64 * lp + (k - j) as f64 * lq;
            ln.exp()
        })
        .collect()
}

/// Multinomial pmf over all count vectors of `trials` draws from `probs`.
/// Outcomes that require a zero-probability category are omitted.
pub fn multinomial_pmf(trials: u32, probs: &[f64]) -> Vec<(Vec<u32>, f64)> {
    let dims = probs.len();
    let probs: Vec<f64> = probs.iter().map(|&p| clamp_prob(p)).collect();
    let lf = ln_factorials(trials as usize);
    let ln_p: Vec<f64> = probs.iter().map(|&p| if p > 0.0 { p.ln() } else { 0.0 }).collect();
    let mut out = Vec::new();
    let mut counts = vec![0u32; dims];
    // Depth-first over compositions; log-weight accumulated incrementally.
    fn rec(
        pos: usize,
        remaining: u32,
        ln_acc: f64,
        counts: &mut [u32],
        probs: &[f64],
        ln_p: &[f64],
        lf: &[f64],
        out: &mut Vec<(Vec<u32>, f64)>,
    ) {
        if pos == counts.len() - 1 {
            if probs[pos] == 0.0 && remaining > 0 {
                return;
            }
            counts[pos] = remaining;
            let ln = ln_acc + remaining as f64 * ln_p[pos] - lf[remaining as usize];
            out.push((counts.to_vec(), ln.exp()));
            counts[pos] = 0;
            return;
        }
        let max_c = if probs[pos] == 0.0 { 0 } else { remaining };
        for c in 0..=max_c {
            counts[pos] = c;
            rec(
                pos + 1,
                remaining - c,
                ln_acc + c as f64 * ln_p[pos] - lf[c as usize],
                counts,
                probs,
                ln_p,
                lf,
                out,
            );
        }
        counts[pos] = 0;
    }
    rec(
        0,
        trials,
        lf[trials as usize],
        &mut counts,
        &probs,
        &ln_p,
        &lf,
        &mut out,
    );
    out
}

/// Convolution of scalar count pmfs (dense vectors indexed by count).
pub fn convolve_dense(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &pa) in a.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        for (j, &pb) in b.iter().enumerate() {
            out[i + j] += pa * pb;
        }
    }
    out
}

/// Folds independent count-vector distributions into their joint sum.
///
/// `groups` yields, per independent group, the pmf of its count vector.
/// The result is sorted lexicographically for deterministic output.
pub fn convolve_count_vectors(
    dims: usize,
    groups: impl Iterator<Item = Vec<(Vec<u32>, f64)>>,
    cap: usize,
) -> Result<CountDistribution<Vec<u32>>> {
    let mut acc: HashMap<Vec<u32>, f64> = HashMap::new();
    acc.insert(vec![0u32; dims], 1.0);
    for outcomes in groups {
        let mut next: HashMap<Vec<u32>, f64> =
            HashMap::with_capacity(acc.len().saturating_mul(outcomes.len()).min(cap + 1));
        for (base, pa) in &acc {
            for (add, pb) in &outcomes {
                let w = pa * pb;
                if w == 0.0 {
                    continue;
                }
                let mut key = base.clone();
                for (k, a) in key.iter_mut().zip(add) {
                    *k += a;
                }
                *next.entry(key).or_insert(0.0) += w;
                if next.len() > cap {
                    return Err(Error::SupportCapExceeded { cap });
                }
            }
        }
        acc = next;
    }
    let mut support: Vec<Vec<u32>> = acc.keys().cloned().collect();
    support.sort_unstable();
    let probs = support.iter().map(|k| acc[k]).collect();
    Ok(CountDistribution { support, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_edge_cases() {
        assert_eq!(binomial_pmf(3, 0.0), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(binomial_pmf(3, 1.0), vec![0.0, 0.0, 0.0, 1.0]);
        let pmf = binomial_pmf(2, 0.5);
        assert!((pmf[0] - 0.25).abs() < 1e-15);
        assert!((pmf[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn binomial_mass_sums_to_one() {
        for &(n, p) in &[(10u32, 0.3), (99, 0.001), (250, 0.97)] {
            let s: f64 = binomial_pmf(n, p).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "n={n} p={p} sum={s}");
        }
    }

    #[test]
    fn multinomial_matches_closed_form() {
        let out = multinomial_pmf(4, &[0.5, 0.3, 0.2]);
        let total: f64 = out.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let p211 = out
            .iter()
            .find(|(c, _)| c == &vec![2, 1, 1])
            .map(|(_, p)| *p)
            .unwrap();
        let expected = 12.0 * 0.5f64.powi(2) * 0.3 * 0.2;
        assert!((p211 - expected).abs() < 1e-14);
    }

    #[test]
    fn multinomial_skips_zero_probability_categories() {
        let out = multinomial_pmf(3, &[0.6, 0.0, 0.4]);
        assert!(out.iter().all(|(c, _)| c[1] == 0));
        let total: f64 = out.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vector_convolution_adds_counts() {
        let g1 = vec![(vec![1, 0], 0.5), (vec![0, 1], 0.5)];
        let g2 = vec![(vec![1, 0], 1.0)];
        let d = convolve_count_vectors(2, [g1, g2].into_iter(), 100).unwrap();
        assert_eq!(d.support, vec![vec![1, 1], vec![2, 0]]);
        assert_eq!(d.probs, vec![0.5, 0.5]);
    }
}
