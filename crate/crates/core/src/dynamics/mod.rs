//! Exact probability engine for deep-state transitions.
//!
//! The deep state is the empirical distribution of player states, kept as
//! integer counts so state identity is exact and hashable. Conditional on
//! everyone else playing a common local law, the next count at a target
//! state is a sum of independent binomials (one per current state group),
//! and the joint law of the full next count vector is the convolution of
//! per-group multinomials. Everything here is computed exactly up to a
//! configurable support cap.

mod pmf;
mod simplex;

pub use pmf::{
    binomial_pmf, convolve_count_vectors, convolve_dense, multinomial_pmf, CountDistribution,
    JointCounts,
};
pub use simplex::{count_nodes, CountSimplex};

use std::sync::Arc;

use dashmap::DashMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CouplingClass, GameSpec, LocalLaw, Stage};

/// Default cap on the number of support points of any exact joint law.
pub const DEFAULT_SUPPORT_CAP: usize = 5_000_000;

/// Empirical state distribution of all `n` players, as integer counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeepState {
    counts: Vec<u32>,
}

impl DeepState {
    pub fn new(counts: Vec<u32>) -> Self {
        assert!(!counts.is_empty(), "deep state needs at least one state");
        Self { counts }
    }

    /// Recounts per-player states into a deep state.
    pub fn from_states(states: &[usize], num_states: usize) -> Self {
        let mut counts = vec![0u32; num_states];
        for &x in states {
            counts[x] += 1;
        }
        Self { counts }
    }

    pub fn n(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, x: usize) -> u32 {
        self.counts[x]
    }

    /// `d` as a probability vector.
    pub fn probs(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Empirical state distribution of the `n - 1` players other than a
/// distinguished one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OthersDeepState {
    counts: Vec<u32>,
}

impl OthersDeepState {
    pub fn new(counts: Vec<u32>) -> Self {
        assert!(!counts.is_empty());
        Self { counts }
    }

    pub fn denom(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, x: usize) -> u32 {
        self.counts[x]
    }
}

/// Removes one unit at the deviator's state: `d^{-i}` from `(d, x^i)`.
pub fn others_from_full(d: &DeepState, x: usize) -> Result<OthersDeepState> {
    if d.count(x) == 0 {
        return Err(Error::DeviatorStateInconsistent { state: x });
    }
    let mut counts = d.counts.clone();
    counts[x] -= 1;
    Ok(OthersDeepState { counts })
}

/// Recomposes the full-population distribution seen by the kernel:
/// `(n-1)/n * others + (1/n) * delta(x)`, exactly, as a probability vector.
pub fn blend(others: &OthersDeepState, x: usize) -> Vec<f64> {
    let n = others.denom() as f64 + 1.0;
    others
        .counts
        .iter()
        .enumerate()
        .map(|(y, &c)| (c as f64 + f64::from(y == x)) / n)
        .collect()
}

/// PMF of `(n-1) * d^{-i}_{t+1}(y)` over `0..=n-1`: the convolution over
/// current states of binomial counts of arrivals at `y`.
pub fn marginal_next_count_pmf(
    spec: &GameSpec,
    t: Stage,
    y: usize,
    deviator_x: usize,
    others: &OthersDeepState,
    law: &LocalLaw,
) -> Vec<f64> {
    let d_full = blend(others, deviator_x);
    let mut acc = vec![1.0];
    for (x, &k) in others.counts.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let p = spec
            .kernel
            .mixed_row(t, x, law.row(x), &d_full)[y];
        acc = convolve_dense(&acc, &binomial_pmf(k, p));
    }
    acc.resize(others.denom() as usize + 1, 0.0);
    acc
}

/// Exact joint law of the next others-deep-state.
///
/// Each current state group of `k` players transitions independently as a
/// multinomial over next states; the joint next count vector is the
/// convolution of those multinomials. Binary state spaces use a dense
/// scalar convolution.
pub fn joint_next_deep_pmf(
    spec: &GameSpec,
    t: Stage,
    deviator_x: usize,
    others: &OthersDeepState,
    law: &LocalLaw,
    cap: usize,
) -> Result<CountDistribution<Vec<u32>>> {
    let nx = spec.num_states();
    let d_full = blend(others, deviator_x);
    if nx == 2 {
        // Track the count at state 1; state 0 holds the remainder.
        let mut acc = vec![1.0];
        for (x, &k) in others.counts.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let p = spec.kernel.mixed_row(t, x, law.row(x), &d_full)[1];
            acc = convolve_dense(&acc, &binomial_pmf(k, p));
        }
        let total = others.denom();
        acc.resize(total as usize + 1, 0.0);
        let (mut support, mut probs) = (Vec::new(), Vec::new());
        for (m, &p) in acc.iter().enumerate() {
            if p != 0.0 {
                support.push(vec![total - m as u32, m as u32]);
                probs.push(p);
            }
        }
        return Ok(CountDistribution { support, probs });
    }
    let groups = others.counts.iter().enumerate().filter(|(_, &k)| k > 0).map(|(x, &k)| {
        let row = spec.kernel.mixed_row(t, x, law.row(x), &d_full);
        multinomial_pmf(k, &row)
    });
    convolve_count_vectors(nx, groups, cap)
}

/// Exact law of the joint state-action empirical distribution of the other
/// players: per state, the action split is multinomial under the common
/// law; splits are independent across states.
pub fn joint_action_pmf(
    others: &OthersDeepState,
    law: &LocalLaw,
    cap: usize,
) -> Result<CountDistribution<JointCounts>> {
    let nx = others.counts.len();
    let nu = law.num_actions();
    let groups = others
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &k)| k > 0)
        .map(|(x, &k)| {
            multinomial_pmf(k, law.row(x))
                .into_iter()
                .map(|(split, p)| {
                    let mut flat = vec![0u32; nx * nu];
                    flat[x * nu..(x + 1) * nu].copy_from_slice(&split);
                    (flat, p)
                })
                .collect::<Vec<_>>()
        });
    let flat = convolve_count_vectors(nx * nu, groups, cap)?;
    let support = flat
        .support
        .into_iter()
        .map(|f| JointCounts {
            counts: f.chunks(nu).map(<[u32]>::to_vec).collect(),
        })
        .collect();
    Ok(CountDistribution {
        support,
        probs: flat.probs,
    })
}

/// Builds the full-population joint distribution `(n-1)/n * D^{-i} + (1/n) delta(x,u)`.
fn compose_joint(others_counts: &JointCounts, x: usize, u: usize, n: usize) -> Vec<Vec<f64>> {
    let mut dd: Vec<Vec<f64>> = others_counts
        .counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / n as f64).collect())
        .collect();
    dd[x][u] += 1.0 / n as f64;
    dd
}

/// Expected stage cost of a player at state `x` in deep state `d`, playing
/// `own_row` while everyone else plays `others_law`.
///
/// Coupling classes `d-only` and `separable` are evaluated in closed form;
/// `general-in-D` takes the exact expectation over action splits.
pub fn expected_stage_cost(
    spec: &GameSpec,
    t: Stage,
    x: usize,
    d: &DeepState,
    own_row: &[f64],
    others_law: &LocalLaw,
    cap: usize,
) -> Result<f64> {
    let others = others_from_full(d, x)?;
    let d_probs = d.probs();
    let n = spec.n;
    match spec.cost.coupling_class() {
        CouplingClass::DOnly => {
            let mut total = 0.0;
            for (u, &w) in own_row.iter().enumerate() {
                if w != 0.0 {
                    total += w * spec.cost.eval_marginal(t, x, u, &d_probs, n);
                }
            }
            Ok(total)
        }
        CouplingClass::Separable => {
            let (noncoop, coop) = spec.cost.separable_parts().expect("separable");
            // Population part of the cooperative average, linear in D.
            let mut pop_term = 0.0;
            for (xp, &k) in others.counts().iter().enumerate() {
                if k == 0 {
                    continue;
                }
                for (up, &wu) in others_law.row(xp).iter().enumerate() {
                    if wu != 0.0 {
                        pop_term += k as f64 / n as f64
                            * wu
                            * spec.cost.eval_part(coop, t, xp, up, &d_probs, n);
                    }
                }
            }
            let mut total = 0.0;
            for (u, &w) in own_row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                total += w
                    * (spec.cost.eval_part(noncoop, t, x, u, &d_probs, n)
                        + pop_term
                        + spec.cost.eval_part(coop, t, x, u, &d_probs, n) / n as f64);
            }
            Ok(total)
        }
        CouplingClass::GeneralInD => {
            let splits = joint_action_pmf(&others, others_law, cap)?;
            let mut total = 0.0;
            for (u, &w) in own_row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mut expect = 0.0;
                for (split, p) in splits.iter() {
                    let dd = compose_joint(split, x, u, n);
                    expect += p * spec.cost.eval(t, x, u, &dd, n);
                }
                total += w * expect;
            }
            Ok(total)
        }
    }
}

/// Monte Carlo estimate of [`expected_stage_cost`] for instances whose exact
/// action-split enumeration exceeds the support cap. Returns the estimate
/// and its standard error; fully determined by `seed`.
pub fn expected_stage_cost_mc(
    spec: &GameSpec,
    t: Stage,
    x: usize,
    d: &DeepState,
    own_row: &[f64],
    others_law: &LocalLaw,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let others = others_from_full(d, x)?;
    let n = spec.n;
    let nu = spec.num_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        // Draw one action split per state group.
        let mut counts = vec![vec![0u32; nu]; others.counts().len()];
        for (xp, &k) in others.counts().iter().enumerate() {
            let row = others_law.row(xp);
            for _ in 0..k {
                let mut r: f64 = rng.random();
                let mut chosen = nu - 1;
                for (u, &p) in row.iter().enumerate() {
                    if r < p {
                        chosen = u;
                        break;
                    }
                    r -= p;
                }
                counts[xp][chosen] += 1;
            }
        }
        let split = JointCounts { counts };
        let mut value = 0.0;
        for (u, &w) in own_row.iter().enumerate() {
            if w != 0.0 {
                let dd = compose_joint(&split, x, u, n);
                value += w * spec.cost.eval(t, x, u, &dd, n);
            }
        }
        sum += value;
        sum_sq += value * value;
    }
    let mean = sum / samples as f64;
    let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
    let se = (var / samples as f64).sqrt();
    Ok((mean, se))
}

/// Deterministic mean-field propagation:
/// `f_t(m, law)(y) = sum_x m(x) T_t(y, x, law(x), m)`.
pub fn mean_field_step(spec: &GameSpec, t: Stage, m: &[f64], law: &LocalLaw) -> Vec<f64> {
    let nx = spec.num_states();
    let mut out = vec![0.0; nx];
    for (x, &mx) in m.iter().enumerate() {
        if mx == 0.0 {
            continue;
        }
        let row = spec.kernel.mixed_row(t, x, law.row(x), m);
        for (y, o) in out.iter_mut().enumerate() {
            *o += mx * row[y];
        }
    }
    out
}

/// Infinite-population stage cost: `sum_u own_row(u) c_t(x, u, M)` with
/// `M(x', u') = m(x') law(x')(u')`.
pub fn infinite_stage_cost(
    spec: &GameSpec,
    t: Stage,
    x: usize,
    m: &[f64],
    own_row: &[f64],
    others_law: &LocalLaw,
) -> f64 {
    let dd: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(xp, &mx)| others_law.row(xp).iter().map(|&p| mx * p).collect())
        .collect();
    own_row
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(u, &w)| w * spec.cost.eval(t, x, u, &dd, spec.n))
        .sum()
}

#[derive(PartialEq, Eq, Hash)]
struct DeepPmfKey {
    stage: usize,
    deviator_x: usize,
    counts: Vec<u32>,
    law: Vec<u64>,
}

/// Shared evaluation context: the spec, the support cap, and a concurrent
/// PMF cache keyed by `(stage, deviator state, counts, law quantized to
/// 1e-12)`. Reads are lock-free; inserts are atomic insert-if-absent.
pub struct DynamicsEngine<'a> {
    pub spec: &'a GameSpec,
    support_cap: usize,
    cache: DashMap<DeepPmfKey, Arc<CountDistribution<Vec<u32>>>>,
    cache_limit: usize,
}

impl<'a> DynamicsEngine<'a> {
    pub fn new(spec: &'a GameSpec) -> Self {
        Self {
            spec,
            support_cap: DEFAULT_SUPPORT_CAP,
            cache: DashMap::new(),
            cache_limit: 200_000,
        }
    }

    pub fn with_support_cap(mut self, cap: usize) -> Self {
        self.support_cap = cap;
        self
    }

    pub fn support_cap(&self) -> usize {
        self.support_cap
    }

    /// Cached joint next-deep-state law. `reusable` marks laws likely to be
    /// looked up again (candidate and converged laws); transient iterates
    /// skip insertion so the cache stays small.
    pub fn next_deep_pmf(
        &self,
        t: Stage,
        deviator_x: usize,
        others: &OthersDeepState,
        law: &LocalLaw,
        reusable: bool,
    ) -> Result<Arc<CountDistribution<Vec<u32>>>> {
        let stage = if self.spec.kernel.time_homogeneous { 0 } else { t };
        let key = DeepPmfKey {
            stage,
            deviator_x,
            counts: others.counts().to_vec(),
            law: law.quantized_key(),
        };
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let pmf = Arc::new(joint_next_deep_pmf(
            self.spec,
            t,
            deviator_x,
            others,
            law,
            self.support_cap,
        )?);
        if reusable && self.cache.len() < self.cache_limit {
            self.cache.entry(key).or_insert_with(|| pmf.clone());
        }
        Ok(pmf)
    }

    pub fn cache_entries(&self) -> usize {
        self.cache.len()
    }
}
