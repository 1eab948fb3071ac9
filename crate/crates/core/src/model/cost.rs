//! Per-stage cost `c_t(x, u, D)` where `D` is the joint state-action
//! empirical distribution of the whole population.
//!
//! The coupling class declares how much of `D` the cost actually reads, so
//! solvers can pick exact fast paths:
//!
//! - `d-only`: reads the state marginal `d` of `D` only;
//! - `separable`: a non-cooperative term plus a population average,
//!   `c = noncoop(x, u, d) + sum_{x',u'} D(x',u') coop(x', u', d)`;
//! - `general-in-D`: arbitrary dependence, requiring an expectation over
//!   realized action splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::kernel::Tensor3 as SlopeTensor;
use crate::model::registry::{lookup_cost, lookup_marginal_cost, CostFn, MarginalCostFn};
use crate::model::Stage;

/// `values[x][u]`.
pub type Tensor2 = Vec<Vec<f64>>;

/// How a cost couples to the population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingClass {
    DOnly,
    Separable,
    GeneralInD,
}

/// A cost term that reads only the state marginal `d`.
#[derive(Clone)]
pub enum StateCost {
    /// `values[t][x][u]`, no coupling at all.
    Tabular { values: Vec<Tensor2> },
    /// `base[t][x][u] + sum_z slope[t][x][u][z] * d(z)`.
    Affine {
        base: Vec<Tensor2>,
        slope: Vec<SlopeTensor>,
    },
    /// Band penalty on the total count of players in state 1 of a binary
    /// model: `underload` below `alpha`, `overload` at or above `gamma`,
    /// zero in between. Thresholds are absolute counts out of `n`.
    RequestBand {
        underload: f64,
        overload: f64,
        alpha: f64,
        gamma: f64,
    },
    /// Registered plug-in `(t, x, u, d, n) -> cost`.
    Callable { name: String, f: MarginalCostFn },
}

impl std::fmt::Debug for StateCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateCost::Tabular { .. } => f.write_str("Tabular"),
            StateCost::Affine { .. } => f.write_str("Affine"),
            StateCost::RequestBand { alpha, gamma, .. } => {
                write!(f, "RequestBand[{alpha},{gamma})")
            }
            StateCost::Callable { name, .. } => write!(f, "Callable({name})"),
        }
    }
}

impl PartialEq for StateCost {
    fn eq(&self, other: &Self) -> bool {
        use StateCost::*;
        match (self, other) {
            (Tabular { values: a }, Tabular { values: b }) => a == b,
            (Affine { base: a, slope: sa }, Affine { base: b, slope: sb }) => a == b && sa == sb,
            (
                RequestBand {
                    underload: u1,
                    overload: o1,
                    alpha: a1,
                    gamma: g1,
                },
                RequestBand {
                    underload: u2,
                    overload: o2,
                    alpha: a2,
                    gamma: g2,
                },
            ) => u1 == u2 && o1 == o2 && a1 == a2 && g1 == g2,
            (Callable { name: a, .. }, Callable { name: b, .. }) => a == b,
            _ => false,
        }
    }
}

/// Snap values that are within rounding noise of an integer, so count-based
/// thresholds evaluate exactly on empirical distributions.
fn snap_to_integer(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

impl StateCost {
    fn stage_index(&self, t: Stage, time_homogeneous: bool, len: usize) -> usize {
        if time_homogeneous || len == 1 {
            0
        } else {
            t - 1
        }
    }

    pub(crate) fn eval(
        &self,
        t: Stage,
        x: usize,
        u: usize,
        d: &[f64],
        n: usize,
        time_homogeneous: bool,
    ) -> f64 {
        match self {
            StateCost::Tabular { values } => {
                values[self.stage_index(t, time_homogeneous, values.len())][x][u]
            }
            StateCost::Affine { base, slope } => {
                let ts = self.stage_index(t, time_homogeneous, base.len());
                let mut c = base[ts][x][u];
                for (z, &dz) in d.iter().enumerate() {
                    c += slope[ts][x][u][z] * dz;
                }
                c
            }
            StateCost::RequestBand {
                underload,
                overload,
                alpha,
                gamma,
            } => {
                let requests = snap_to_integer(n as f64 * d[1]);
                if requests < *alpha {
                    *underload
                } else if requests >= *gamma {
                    *overload
                } else {
                    0.0
                }
            }
            StateCost::Callable { f, .. } => f(t, x, u, d, n),
        }
    }

    /// Number of tabulated stage slices, if tabulated.
    pub fn tabulated_stages(&self) -> Option<usize> {
        match self {
            StateCost::Tabular { values } => Some(values.len()),
            StateCost::Affine { base, .. } => Some(base.len()),
            _ => None,
        }
    }
}

/// Cost specification with a declared coupling class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostRepr", into = "CostRepr")]
pub struct CostSpec {
    pub form: CostForm,
    pub time_homogeneous: bool,
}

#[derive(Clone)]
pub enum CostForm {
    DOnly(StateCost),
    Separable {
        noncooperative: StateCost,
        cooperative: StateCost,
    },
    GeneralInD {
        name: String,
        f: CostFn,
    },
}

impl PartialEq for CostForm {
    fn eq(&self, other: &Self) -> bool {
        use CostForm::*;
        match (self, other) {
            (DOnly(a), DOnly(b)) => a == b,
            (
                Separable {
                    noncooperative: a1,
                    cooperative: a2,
                },
                Separable {
                    noncooperative: b1,
                    cooperative: b2,
                },
            ) => a1 == b1 && a2 == b2,
            (GeneralInD { name: a, .. }, GeneralInD { name: b, .. }) => a == b,
            _ => false,
        }
    }
}

impl std::fmt::Debug for CostForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostForm::DOnly(c) => write!(f, "DOnly({c:?})"),
            CostForm::Separable {
                noncooperative,
                cooperative,
            } => write!(f, "Separable({noncooperative:?} + avg {cooperative:?})"),
            CostForm::GeneralInD { name, .. } => write!(f, "GeneralInD({name})"),
        }
    }
}

impl CostSpec {
    pub fn d_only(form: StateCost) -> Self {
        Self {
            form: CostForm::DOnly(form),
            time_homogeneous: true,
        }
    }

    pub fn separable(noncooperative: StateCost, cooperative: StateCost) -> Self {
        Self {
            form: CostForm::Separable {
                noncooperative,
                cooperative,
            },
            time_homogeneous: true,
        }
    }

    pub fn general(name: &str, f: CostFn) -> Self {
        Self {
            form: CostForm::GeneralInD {
                name: name.to_string(),
                f,
            },
            time_homogeneous: true,
        }
    }

    pub fn with_stages(mut self) -> Self {
        self.time_homogeneous = false;
        self
    }

    pub fn coupling_class(&self) -> CouplingClass {
        match &self.form {
            CostForm::DOnly(_) => CouplingClass::DOnly,
            CostForm::Separable { .. } => CouplingClass::Separable,
            CostForm::GeneralInD { .. } => CouplingClass::GeneralInD,
        }
    }

    /// Full evaluation at a joint distribution `dd[x][u]` over states and
    /// actions; `n` is the population size (used by count-threshold forms).
    pub fn eval(&self, t: Stage, x: usize, u: usize, dd: &[Vec<f64>], n: usize) -> f64 {
        match &self.form {
            CostForm::DOnly(c) => {
                let d: Vec<f64> = dd.iter().map(|row| row.iter().sum()).collect();
                c.eval(t, x, u, &d, n, self.time_homogeneous)
            }
            CostForm::Separable {
                noncooperative,
                cooperative,
            } => {
                let d: Vec<f64> = dd.iter().map(|row| row.iter().sum()).collect();
                let mut total = noncooperative.eval(t, x, u, &d, n, self.time_homogeneous);
                for (xp, row) in dd.iter().enumerate() {
                    for (up, &w) in row.iter().enumerate() {
                        if w != 0.0 {
                            total += w * cooperative.eval(t, xp, up, &d, n, self.time_homogeneous);
                        }
                    }
                }
                total
            }
            CostForm::GeneralInD { f, .. } => f(t, x, u, dd, n),
        }
    }

    /// Fast-path evaluation for `d-only` costs directly at a state marginal.
    ///
    /// Panics if the coupling class is not `d-only`; callers dispatch on
    /// [`CostSpec::coupling_class`] first.
    pub fn eval_marginal(&self, t: Stage, x: usize, u: usize, d: &[f64], n: usize) -> f64 {
        match &self.form {
            CostForm::DOnly(c) => c.eval(t, x, u, d, n, self.time_homogeneous),
            _ => panic!("eval_marginal called on a non-d-only cost"),
        }
    }

    /// The two terms of a separable cost, if the class is separable.
    pub fn separable_parts(&self) -> Option<(&StateCost, &StateCost)> {
        match &self.form {
            CostForm::Separable {
                noncooperative,
                cooperative,
            } => Some((noncooperative, cooperative)),
            _ => None,
        }
    }

    pub(crate) fn eval_part(
        &self,
        part: &StateCost,
        t: Stage,
        x: usize,
        u: usize,
        d: &[f64],
        n: usize,
    ) -> f64 {
        part.eval(t, x, u, d, n, self.time_homogeneous)
    }
}

/// Wire representation of a cost.
#[derive(Serialize, Deserialize, Clone)]
struct CostRepr {
    coupling: CouplingClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_only: Option<StateCostRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noncooperative: Option<StateCostRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cooperative: Option<StateCostRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    callable: Option<String>,
    time_homogeneous: bool,
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(rename_all = "snake_case")]
enum StateCostRepr {
    Table(Vec<Tensor2>),
    Affine {
        base: Vec<Tensor2>,
        slope: Vec<SlopeTensor>,
    },
    RequestBand {
        underload: f64,
        overload: f64,
        alpha: f64,
        gamma: f64,
    },
    Callable(String),
}

impl From<StateCost> for StateCostRepr {
    fn from(c: StateCost) -> Self {
        match c {
            StateCost::Tabular { values } => StateCostRepr::Table(values),
            StateCost::Affine { base, slope } => StateCostRepr::Affine { base, slope },
            StateCost::RequestBand {
                underload,
                overload,
                alpha,
                gamma,
            } => StateCostRepr::RequestBand {
                underload,
                overload,
                alpha,
                gamma,
            },
            StateCost::Callable { name, .. } => StateCostRepr::Callable(name),
        }
    }
}

impl TryFrom<StateCostRepr> for StateCost {
    type Error = Error;

    fn try_from(r: StateCostRepr) -> Result<Self> {
        Ok(match r {
            StateCostRepr::Table(values) => StateCost::Tabular { values },
            StateCostRepr::Affine { base, slope } => StateCost::Affine { base, slope },
            StateCostRepr::RequestBand {
                underload,
                overload,
                alpha,
                gamma,
            } => StateCost::RequestBand {
                underload,
                overload,
                alpha,
                gamma,
            },
            StateCostRepr::Callable(name) => {
                let f = lookup_marginal_cost(&name)
                    .ok_or(Error::UnknownCallable { name: name.clone() })?;
                StateCost::Callable { name, f }
            }
        })
    }
}

impl From<CostSpec> for CostRepr {
    fn from(c: CostSpec) -> Self {
        let coupling = c.coupling_class();
        let time_homogeneous = c.time_homogeneous;
        match c.form {
            CostForm::DOnly(form) => CostRepr {
                coupling,
                d_only: Some(form.into()),
                noncooperative: None,
                cooperative: None,
                callable: None,
                time_homogeneous,
            },
            CostForm::Separable {
                noncooperative,
                cooperative,
            } => CostRepr {
                coupling,
                d_only: None,
                noncooperative: Some(noncooperative.into()),
                cooperative: Some(cooperative.into()),
                callable: None,
                time_homogeneous,
            },
            CostForm::GeneralInD { name, .. } => CostRepr {
                coupling,
                d_only: None,
                noncooperative: None,
                cooperative: None,
                callable: Some(name),
                time_homogeneous,
            },
        }
    }
}

impl TryFrom<CostRepr> for CostSpec {
    type Error = Error;

    fn try_from(r: CostRepr) -> Result<Self> {
        let missing = |field: &str| Error::ModelFormat {
            path: format!("cost.{field}"),
            message: "missing field for declared coupling class".to_string(),
        };
        let form = match r.coupling {
            CouplingClass::DOnly => CostForm::DOnly(r.d_only.ok_or_else(|| missing("d_only"))?.try_into()?),
            CouplingClass::Separable => CostForm::Separable {
                noncooperative: r
                    .noncooperative
                    .ok_or_else(|| missing("noncooperative"))?
                    .try_into()?,
                cooperative: r.cooperative.ok_or_else(|| missing("cooperative"))?.try_into()?,
            },
            CouplingClass::GeneralInD => {
                let name = r.callable.ok_or_else(|| missing("callable"))?;
                let f = lookup_cost(&name).ok_or(Error::UnknownCallable { name: name.clone() })?;
                CostForm::GeneralInD { name, f }
            }
        };
        Ok(CostSpec {
            form,
            time_homogeneous: r.time_homogeneous,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_band_thresholds_are_count_exact() {
        let c = StateCost::RequestBand {
            underload: 5.0,
            overload: 1.0,
            alpha: 30.0,
            gamma: 70.0,
        };
        let n = 100;
        // 29 requests -> underload; 30 -> inside; 70 -> overload.
        assert_eq!(c.eval(1, 0, 0, &[1.0 - 0.29, 0.29], n, true), 5.0);
        assert_eq!(c.eval(1, 0, 0, &[0.70, 0.30], n, true), 0.0);
        assert_eq!(c.eval(1, 1, 0, &[0.30, 0.70], n, true), 1.0);
    }

    #[test]
    fn separable_eval_matches_decomposition() {
        let noncoop = StateCost::Tabular {
            values: vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]],
        };
        let coop = StateCost::Affine {
            base: vec![vec![vec![0.5, 0.0], vec![0.0, 0.5]]],
            slope: vec![vec![vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![0.0, 1.0]]]],
        };
        let cost = CostSpec::separable(noncoop, coop);
        let dd = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let d = [0.3, 0.7];
        let mut expected = 3.0; // noncoop at (x=1,u=0)
        let coop_eval = |xp: usize, up: usize| -> f64 {
            match (xp, up) {
                (0, 0) => 0.5 + d[0],
                (0, 1) => 0.0,
                (1, 0) => 0.0,
                (1, 1) => 0.5 + d[1],
                _ => unreachable!(),
            }
        };
        for (xp, row) in dd.iter().enumerate() {
            for (up, w) in row.iter().enumerate() {
                expected += w * coop_eval(xp, up);
            }
        }
        assert!((cost.eval(1, 1, 0, &dd, 4) - expected).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "non-d-only")]
    fn marginal_fast_path_rejects_general_costs() {
        let cost = CostSpec::general("c", std::sync::Arc::new(|_, _, _, _, _| 0.0));
        cost.eval_marginal(1, 0, 0, &[1.0], 2);
    }
}
