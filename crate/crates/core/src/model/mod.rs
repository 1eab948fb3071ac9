//! Game description data model: state/action spaces, transition kernels,
//! stage costs, local control laws and the assembled [`GameSpec`].
//!
//! A game couples `n` identical players through the empirical distribution
//! of their states (the deep state). The kernel gives the per-player
//! transition probability as a function of own state, own action and the
//! population state distribution; the cost couples players through the
//! joint state-action empirical distribution.

mod cost;
mod example;
mod io;
mod kernel;
mod registry;
mod validate;

pub use cost::{CostForm, CostSpec, CouplingClass, StateCost, Tensor2};
pub use example::{build_convergence_demo, build_example1, build_example1_with};
pub use io::{load, load_str, save, save_string, SCHEMA_VERSION};
pub use kernel::{KernelForm, Tensor3, Tensor4, TransitionKernel};
pub use registry::{
    register_cost_fn, register_kernel_fn, register_marginal_cost_fn, CostFn, KernelFn,
    MarginalCostFn,
};
pub use validate::{validate, Issue, ValidationReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage index, 1-based to match the usual time convention `t = 1..=T`.
pub type Stage = usize;

/// Mass two probabilities may deviate from exact normalization.
pub const PROB_TOL: f64 = 1e-12;

/// Ordered finite state space. Indices `0..size` are the canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    labels: Vec<String>,
}

/// Ordered finite action space. Indices `0..size` are the canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    labels: Vec<String>,
}

macro_rules! space_impl {
    ($ty:ident, $what:literal) => {
        impl $ty {
            /// Builds the space from distinct labels.
            pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
                let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
                if labels.is_empty() {
                    return Err(Error::Inconsistent(format!("{} space is empty", $what)));
                }
                for (i, a) in labels.iter().enumerate() {
                    if labels[..i].contains(a) {
                        return Err(Error::Inconsistent(format!(
                            "duplicate {} label `{a}`",
                            $what
                        )));
                    }
                }
                Ok(Self { labels })
            }

            /// Numbered labels `0..size`.
            pub fn numbered(size: usize) -> Self {
                Self {
                    labels: (0..size).map(|i| i.to_string()).collect(),
                }
            }

            pub fn size(&self) -> usize {
                self.labels.len()
            }

            pub fn label(&self, i: usize) -> &str {
                &self.labels[i]
            }

            pub fn labels(&self) -> &[String] {
                &self.labels
            }
        }
    };
}

space_impl!(StateSpace, "state");
space_impl!(ActionSpace, "action");

/// Planning horizon: a finite number of stages or an infinite discounted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Total cost over stages `1..=T`.
    Finite { t: usize },
    /// Discounted cost with factor `beta` in (0,1); requires a
    /// time-homogeneous kernel and cost.
    Discounted { beta: f64 },
}

impl Horizon {
    pub fn is_finite(&self) -> bool {
        matches!(self, Horizon::Finite { .. })
    }

    /// Number of stages for finite horizons.
    pub fn stages(&self) -> Option<usize> {
        match self {
            Horizon::Finite { t } => Some(*t),
            Horizon::Discounted { .. } => None,
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            Horizon::Finite { .. } => None,
            Horizon::Discounted { beta } => Some(*beta),
        }
    }
}

/// A local control law: one probability row over actions per state.
///
/// This is the per-stage strategy object shared by every player of an
/// index-invariant profile; a pure action is a row with a single unit entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLaw {
    rows: Vec<Vec<f64>>,
}

impl LocalLaw {
    /// Builds a law from explicit rows, checking simplex membership.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let law = Self { rows };
        law.check()?;
        Ok(law)
    }

    /// Uniform mixing over all actions at every state.
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self {
            rows: vec![vec![p; num_actions]; num_states],
        }
    }

    /// Rows taken as-is; used by solver internals that probe slightly
    /// infeasible points (e.g. finite-difference derivatives).
    pub(crate) fn from_rows_unchecked(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    /// Pure law: state `x` plays `actions[x]` with probability one.
    pub fn pure(actions: &[usize], num_actions: usize) -> Self {
        let rows = actions
            .iter()
            .map(|&u| {
                let mut row = vec![0.0; num_actions];
                row[u] = 1.0;
                row
            })
            .collect();
        Self { rows }
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn num_actions(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn set_row(&mut self, x: usize, row: Vec<f64>) {
        self.rows[x] = row;
    }

    /// Verifies every row is a probability vector within [`PROB_TOL`].
    pub fn check(&self) -> Result<()> {
        for (x, row) in self.rows.iter().enumerate() {
            if row.len() != self.num_actions() {
                return Err(Error::Inconsistent(format!("law row {x} has ragged length")));
            }
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0 + PROB_TOL).contains(&p) {
                    return Err(Error::Inconsistent(format!(
                        "law row {x} entry {p} outside [0,1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::Inconsistent(format!(
                    "law row {x} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute entry difference against another law.
    pub fn max_abs_diff(&self, other: &LocalLaw) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            for (p, q) in a.iter().zip(b) {
                d = d.max((p - q).abs());
            }
        }
        d
    }

    /// Quantizes entries to 1e-12 for use as a hash key.
    pub fn quantized_key(&self) -> Vec<u64> {
        self.rows
            .iter()
            .flatten()
            .map(|p| (p * 1e12).round() as u64)
            .collect()
    }
}

/// Complete description of a symmetric population game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub states: StateSpace,
    pub actions: ActionSpace,
    /// Population size, at least 2.
    pub n: usize,
    pub horizon: Horizon,
    pub kernel: TransitionKernel,
    pub cost: CostSpec,
    /// Common initial state distribution of every player.
    pub initial_dist: Vec<f64>,
}

impl GameSpec {
    pub fn num_states(&self) -> usize {
        self.states.size()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.size()
    }

    /// Discount factor applied to continuation values (1 for finite horizon).
    pub fn discount(&self) -> f64 {
        self.horizon.beta().unwrap_or(1.0)
    }

    /// Validates and returns `self`, or the full violation report.
    pub fn checked(self) -> Result<GameSpec> {
        let report = validate(&self);
        if report.passed() {
            Ok(self)
        } else {
            Err(Error::InvalidModel(report))
        }
    }
}

/// Sampling grid over the state simplex used by validators and estimators:
/// every vertex plus the uniform point.
pub(crate) fn simplex_probe_points(num_states: usize) -> Vec<Vec<f64>> {
    let mut points = Vec::with_capacity(num_states + 1);
    for x in 0..num_states {
        let mut v = vec![0.0; num_states];
        v[x] = 1.0;
        points.push(v);
    }
    points.push(vec![1.0 / num_states as f64; num_states]);
    points
}
