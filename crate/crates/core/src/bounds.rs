//! Model constants and performance-gap bounds.
//!
//! The no-sharing strategy's cost approaches the deep equilibrium's at rate
//! `O(1/sqrt(n))`, with constants built from Lipschitz moduli of the model:
//! `K^p` (kernel in the state distribution), `K^c` (cost in the joint
//! distribution) and `K^m` (one-step mean-field map). The backward
//! recursions
//!
//! ```text
//! K^v_t = K^c_t + K^v_{t+1} K^m_t + K^p_t * sum_{tau=1}^{t+1} beta^{tau-1} K^c_tau
//! K^o_t = K^v_{t+1} + K^o_{t+1}
//! ```
//!
//! (terminal values zero) turn those into value-distance constants. All
//! rate bounds are reported "up to the unspecified O-constant": the raw
//! bracket is returned separately and never dressed up as ground truth.
//!
//! Estimated moduli are sample maxima of difference quotients, hence lower
//! bounds on the true constants; callers may override with analytic values.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::mean_field_step;
use crate::error::{Error, Result};
use crate::model::{simplex_probe_points, GameSpec, LocalLaw};

/// Where a set of constants came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    UserSupplied,
    GridEstimated,
}

/// Model constants feeding the bound recursions. Vectors hold one entry
/// per stage, or a single entry for time-homogeneous models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Kernel sensitivity to the state distribution.
    pub kp: Vec<f64>,
    /// Cost sensitivity to the joint state-action distribution.
    pub kc: Vec<f64>,
    /// Lipschitz modulus of the one-step mean-field map.
    pub km: Vec<f64>,
    pub beta: Option<f64>,
    /// Absolute bound on the stage cost. Kept separate from `kc`: the
    /// uniform cost bound and the Lipschitz modulus are different
    /// quantities even where notation overloads them.
    pub cost_bound: f64,
    pub provenance: Provenance,
    /// Kernel structurally independent of the state distribution; implies
    /// `kp = 0` and `km = 1` exactly.
    pub structurally_decoupled: bool,
}

/// A rate bound with its pieces exposed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundOutput {
    /// `dist_term + rate_term`.
    pub value: f64,
    /// `K^v_1 * |d - m|` (zero for the discounted bound).
    pub dist_term: f64,
    /// `bracket / sqrt(n)`.
    pub rate_term: f64,
    /// The constant multiplying `O(1/sqrt(n))`.
    pub bracket: f64,
    /// Always "up to the unspecified O-constant".
    pub note: String,
}

fn uniform_simplex(rng: &mut impl Rng, dims: usize) -> Vec<f64> {
    // Exponential spacings normalize to a uniform Dirichlet(1,..,1) draw.
    let mut v: Vec<f64> = (0..dims)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let s: f64 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Estimates the model constants from `sample_budget` seeded draws.
///
/// The samples form a prefix chain: a larger budget extends the smaller
/// one, so estimates are monotone in the budget. Structurally decoupled
/// kernels get `kp = 0`, `km = 1` exactly instead of estimates.
pub fn estimate_constants(spec: &GameSpec, sample_budget: usize, seed: u64) -> BoundConstants {
    let nx = spec.num_states();
    let nu = spec.num_actions();
    let stages = if spec.kernel.time_homogeneous && spec.cost.time_homogeneous {
        1
    } else {
        spec.kernel
            .tabulated_stages()
            .unwrap_or(1)
            .max(spec.horizon.stages().unwrap_or(1))
    };
    let decoupled = spec.kernel.is_decoupled();
    let mut kp = vec![0.0f64; stages];
    let mut kc = vec![0.0f64; stages];
    let mut km = vec![0.0f64; stages];
    let mut cost_bound = 0.0f64;

    // Deterministic probes first so even budget 0 sees the band edges.
    for d in simplex_probe_points(nx) {
        let dd: Vec<Vec<f64>> = d.iter().map(|&p| vec![p / nu as f64; nu]).collect();
        for t in 1..=stages {
            for x in 0..nx {
                for u in 0..nu {
                    cost_bound = cost_bound.max(spec.cost.eval(t, x, u, &dd, spec.n));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..sample_budget {
        let d = uniform_simplex(&mut rng, nx);
        let m = uniform_simplex(&mut rng, nx);
        let flat_a = uniform_simplex(&mut rng, nx * nu);
        let flat_b = uniform_simplex(&mut rng, nx * nu);
        let law = LocalLaw::from_rows_unchecked(
            (0..nx).map(|_| uniform_simplex(&mut rng, nu)).collect(),
        );
        let dd: Vec<Vec<f64>> = flat_a.chunks(nu).map(<[f64]>::to_vec).collect();
        let mm: Vec<Vec<f64>> = flat_b.chunks(nu).map(<[f64]>::to_vec).collect();
        let dist_dm = inf_norm_diff(&d, &m);
        let dist_joint = flat_a
            .iter()
            .zip(&flat_b)
            .fold(0.0f64, |mx, (a, b)| mx.max((a - b).abs()));
        for t in 1..=stages {
            if !decoupled && dist_dm > 1e-12 {
                for x in 0..nx {
                    for u in 0..nu {
                        for y in 0..nx {
                            let dp = (spec.kernel.eval(t, y, x, u, &d)
                                - spec.kernel.eval(t, y, x, u, &m))
                            .abs();
                            kp[t - 1] = kp[t - 1].max(dp / dist_dm);
                        }
                    }
                }
                let fd = mean_field_step(spec, t, &d, &law);
                let fm = mean_field_step(spec, t, &m, &law);
                km[t - 1] = km[t - 1].max(inf_norm_diff(&fd, &fm) / dist_dm);
            }
            if dist_joint > 1e-12 {
                for x in 0..nx {
                    for u in 0..nu {
                        let ca = spec.cost.eval(t, x, u, &dd, spec.n);
                        let cb = spec.cost.eval(t, x, u, &mm, spec.n);
                        kc[t - 1] = kc[t - 1].max((ca - cb).abs() / dist_joint);
                        cost_bound = cost_bound.max(ca).max(cb);
                    }
                }
            }
        }
    }
    if decoupled {
        kp = vec![0.0; stages];
        km = vec![1.0; stages];
    }
    BoundConstants {
        kp,
        kc,
        km,
        beta: spec.horizon.beta(),
        cost_bound,
        provenance: Provenance::GridEstimated,
        structurally_decoupled: decoupled,
    }
}

fn at(v: &[f64], t_one_based: usize) -> f64 {
    v[(t_one_based - 1).min(v.len() - 1)]
}

/// Backward evaluation of the constant recursions over stages `1..=t_max`.
/// Returns `(K^v, K^o)` indexed so that `kv[0]` is `K^v_1`.
pub fn kv_ko(kp: &[f64], kc: &[f64], km: &[f64], beta: f64, t_max: usize) -> (Vec<f64>, Vec<f64>) {
    let mut kv = vec![0.0; t_max + 1];
    let mut ko = vec![0.0; t_max + 1];
    for t in (1..=t_max).rev() {
        let mut tail = 0.0;
        for tau in 1..=t + 1 {
            tail += beta.powi(tau as i32 - 1) * at(kc, tau);
        }
        kv[t - 1] = at(kc, t) + kv[t] * at(km, t) + at(kp, t) * tail;
        ko[t - 1] = kv[t] + ko[t];
    }
    kv.truncate(t_max);
    ko.truncate(t_max);
    (kv, ko)
}

/// Finite-horizon value-distance bound
/// `K^v_1 * gap + K^o_1 / sqrt(n)`, up to the unspecified O-constant.
pub fn finite_bound(
    constants: &BoundConstants,
    t_max: usize,
    n: usize,
    d_vs_m_gap: f64,
) -> BoundOutput {
    let beta = constants.beta.unwrap_or(1.0);
    let (kv, ko) = kv_ko(&constants.kp, &constants.kc, &constants.km, beta, t_max);
    let dist_term = kv[0] * d_vs_m_gap;
    let rate_term = ko[0] / (n as f64).sqrt();
    BoundOutput {
        value: dist_term + rate_term,
        dist_term,
        rate_term,
        bracket: ko[0],
        note: "up to the unspecified O-constant".to_string(),
    }
}

/// Discounted performance-gap bound
/// `(2 - beta)(1 - beta + K^p) / (1 - beta) * K^c / (1 - beta K^m) / sqrt(n)`.
///
/// Requires `beta K^m < 1`; refused otherwise with the offending value.
/// Structurally decoupled models bypass the check with `K^p = 0, K^m = 1`.
pub fn discounted_bound(constants: &BoundConstants, n: usize) -> Result<BoundOutput> {
    let beta = constants
        .beta
        .ok_or_else(|| Error::Inconsistent("discounted bound needs a discount factor".into()))?;
    let (kp, km) = if constants.structurally_decoupled {
        (0.0, 1.0)
    } else {
        let beta_km = beta * constants.km[0];
        if beta_km >= 1.0 {
            return Err(Error::CouplingTooStrong { beta_km });
        }
        (constants.kp[0], constants.km[0])
    };
    let kc = constants.kc[0];
    let bracket = (2.0 - beta) * (1.0 - beta + kp) / (1.0 - beta) * kc / (1.0 - beta * km);
    let rate_term = bracket / (n as f64).sqrt();
    Ok(BoundOutput {
        value: rate_term,
        dist_term: 0.0,
        rate_term,
        bracket,
        note: "up to the unspecified O-constant".to_string(),
    })
}

/// Conservative per-stage cost bound, from the deterministic probe grid
/// plus a seeded sample. Used to size discounted truncation horizons.
pub fn estimate_cost_bound(spec: &GameSpec, sample_budget: usize, seed: u64) -> f64 {
    estimate_constants(spec, sample_budget, seed).cost_bound
}
