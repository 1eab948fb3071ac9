//! Equilibria under deep-state sharing: every player observes its own
//! state and the empirical state distribution of the population.
//!
//! Finite horizon: backward induction over the exact count lattice, with a
//! best-response fixed point at every `(stage, deep state)` node. The
//! resulting profile is index-invariant by construction: one local law per
//! node, used by every player.
//!
//! Discounted horizon: value iteration on `V(x, d)`, each sweep solving the
//! same per-node fixed point with discounted continuation, until the
//! sup-norm sweep difference meets the stopping rule
//! `|V_{k+1} - V_k| <= vi_tolerance (1 - beta) / (2 beta)`.
//!
//! The exploitability audit replays a solved strategy and computes, for
//! every starting stage and node, the gain a single deviator could get by
//! best-responding against the frozen population.

mod stage;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub(crate) use stage::{solve_from, solve_stage_fixed_point, StageObjective, StageParams};

use crate::dynamics::{
    multinomial_pmf, others_from_full, CountSimplex, DeepState, DynamicsEngine, OthersDeepState,
    DEFAULT_SUPPORT_CAP,
};
use crate::error::{Error, Result};
use crate::model::{CouplingClass, GameSpec, Horizon, LocalLaw, Stage};

/// Tunable solver knobs with the documented defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverParams {
    /// Stage fixed-point exploitability tolerance (relative to the value
    /// scale of the node, with an absolute floor at scale 1).
    pub fp_tolerance: f64,
    /// Iteration cap per stage fixed point.
    pub max_iters: usize,
    /// Discounted value-iteration tolerance.
    pub vi_tolerance: f64,
    /// Sweep cap for value iteration.
    pub max_sweeps: usize,
    /// Cap on exact pmf support sizes and lattice enumerations.
    pub support_cap: usize,
    /// Re-run each node fixed point from a second initialization and flag
    /// disagreements beyond 1e-6.
    pub check_uniqueness: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            fp_tolerance: 1e-8,
            max_iters: 10_000,
            vi_tolerance: 1e-8,
            max_sweeps: 10_000,
            support_cap: DEFAULT_SUPPORT_CAP,
            check_uniqueness: false,
        }
    }
}

/// Whether tables are stage-indexed or a single stationary slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    Finite,
    StationaryDiscounted,
}

/// Equilibrium values `V_t(x, d)` on the count lattice.
///
/// Entries at inconsistent pairs (deviator state unoccupied, `d(x) = 0`)
/// are `NaN` and never read.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub mode: StrategyMode,
    simplex: CountSimplex,
    /// `slices[t-1][d_index][x]`; a single slice in stationary mode.
    slices: Vec<Vec<Vec<f64>>>,
}

impl ValueTable {
    pub fn stages(&self) -> usize {
        self.slices.len()
    }

    pub fn simplex(&self) -> &CountSimplex {
        &self.simplex
    }

    fn slice_index(&self, t: Stage) -> usize {
        match self.mode {
            StrategyMode::Finite => t - 1,
            StrategyMode::StationaryDiscounted => 0,
        }
    }

    pub fn stage_slice(&self, t: Stage) -> &[Vec<f64>] {
        &self.slices[self.slice_index(t)]
    }

    /// `V_t(x, d)`.
    pub fn get(&self, t: Stage, d: &DeepState, x: usize) -> Result<f64> {
        let idx = self.simplex.index_of(d.counts()).ok_or_else(|| {
            Error::Inconsistent(format!("deep state {:?} not on lattice", d.counts()))
        })?;
        Ok(self.slices[self.slice_index(t)][idx][x])
    }
}

/// Index-invariant equilibrium strategy: one local law per `(t, d)` node
/// (per `d` in stationary mode).
#[derive(Debug, Clone)]
pub struct EquilibriumStrategy {
    pub mode: StrategyMode,
    pub n: usize,
    simplex: CountSimplex,
    /// `laws[t-1][d_index]`; a single stage in stationary mode.
    laws: Vec<Vec<LocalLaw>>,
}

impl EquilibriumStrategy {
    pub fn stages(&self) -> usize {
        self.laws.len()
    }

    pub fn simplex(&self) -> &CountSimplex {
        &self.simplex
    }

    /// Law at `(t, d)`; stationary strategies ignore `t`.
    pub fn law(&self, t: Stage, d: &DeepState) -> Result<&LocalLaw> {
        let idx = self.simplex.index_of(d.counts()).ok_or(Error::StrategyGap {
            stage: t,
            counts: d.counts().to_vec(),
        })?;
        let slice = match self.mode {
            StrategyMode::StationaryDiscounted => 0,
            StrategyMode::Finite => {
                if t == 0 || t > self.laws.len() {
                    return Err(Error::StrategyGap {
                        stage: t,
                        counts: d.counts().to_vec(),
                    });
                }
                t - 1
            }
        };
        Ok(&self.laws[slice][idx])
    }

    pub fn law_slices(&self) -> &[Vec<LocalLaw>] {
        &self.laws
    }

    /// Replaces the law at one node (test and experiment support).
    pub fn set_law(&mut self, t: Stage, d: &DeepState, law: LocalLaw) -> Result<()> {
        let idx = self.simplex.index_of(d.counts()).ok_or(Error::StrategyGap {
            stage: t,
            counts: d.counts().to_vec(),
        })?;
        let slice = match self.mode {
            StrategyMode::StationaryDiscounted => 0,
            StrategyMode::Finite => t - 1,
        };
        self.laws[slice][idx] = law;
        Ok(())
    }
}

/// Convergence record of one node fixed point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpNodeReport {
    pub t: Stage,
    pub d_counts: Vec<u32>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set by the uniqueness probe: distinct initializations converged to
    /// laws differing by more than 1e-6.
    pub multiple_equilibria: Option<bool>,
}

/// All node fixed-point records of a solve.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub entries: Vec<FpNodeReport>,
}

impl FixedPointReport {
    pub fn all_converged(&self) -> bool {
        self.entries.iter().all(|e| e.converged)
    }

    pub fn max_residual(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.residual))
    }

    pub fn num_converged(&self) -> usize {
        self.entries.iter().filter(|e| e.converged).count()
    }

    /// CSV with columns `t,d,iters,residual,converged`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,d,iters,residual,converged\n");
        for e in &self.entries {
            let d = e
                .d_counts
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("|");
            out.push_str(&format!(
                "{},{},{},{:e},{}\n",
                e.t, d, e.iterations, e.residual, e.converged
            ));
        }
        out
    }
}

/// Value-iteration diagnostics for discounted solves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscountedInfo {
    pub sweeps: usize,
    /// Sup-norm successive differences, one per sweep.
    pub sweep_deltas: Vec<f64>,
    /// Measured `|TV - V|` of the returned table.
    pub bellman_residual: f64,
    pub converged: bool,
}

impl DiscountedInfo {
    /// Ratios `delta_{k+1} / delta_k`: the empirical contraction factors.
    pub fn contraction_factors(&self) -> Vec<f64> {
        self.sweep_deltas
            .windows(2)
            .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
            .collect()
    }
}

/// Output of a deep-state-sharing solve.
#[derive(Debug, Clone)]
pub struct DssSolution {
    pub strategy: EquilibriumStrategy,
    pub values: ValueTable,
    pub report: FixedPointReport,
    pub discounted: Option<DiscountedInfo>,
}

/// One state's best-response summary at a node.
#[derive(Debug, Clone)]
pub struct BestResponseRow {
    pub state: usize,
    /// All minimizing pure actions (ties within 1e-12 of the value scale).
    pub actions: Vec<usize>,
    pub value: f64,
}

/// Exploitability audit result: the largest gain any single deviator can
/// realize against the frozen population strategy, over all starting
/// stages and nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub max_gain: f64,
    pub worst_stage: Stage,
    pub worst_d_counts: Vec<u32>,
    pub worst_state: usize,
    /// Max gain per starting stage (finite mode).
    pub per_stage: Vec<f64>,
}

/// Values of one stage over the lattice, `[d_index][x]`.
pub type StageValues = Vec<Vec<f64>>;

/// Deep-state-sharing solver bound to one game.
pub struct DssSolver<'a> {
    pub spec: &'a GameSpec,
    pub params: SolverParams,
    engine: DynamicsEngine<'a>,
    simplex: CountSimplex,
}

impl<'a> DssSolver<'a> {
    pub fn new(spec: &'a GameSpec, params: SolverParams) -> Result<Self> {
        let simplex =
            CountSimplex::enumerate(spec.n as u32, spec.num_states(), params.support_cap)?;
        let engine = DynamicsEngine::new(spec).with_support_cap(params.support_cap);
        Ok(Self {
            spec,
            params,
            engine,
            simplex,
        })
    }

    pub fn simplex(&self) -> &CountSimplex {
        &self.simplex
    }

    pub fn engine(&self) -> &DynamicsEngine<'a> {
        &self.engine
    }

    /// Solves according to the spec's horizon.
    pub fn solve(&self) -> Result<DssSolution> {
        match self.spec.horizon {
            Horizon::Finite { .. } => self.solve_finite(),
            Horizon::Discounted { .. } => self.solve_discounted(),
        }
    }

    /// Backward induction over stages `T..1`.
    pub fn solve_finite(&self) -> Result<DssSolution> {
        let t_max = self
            .spec
            .horizon
            .stages()
            .ok_or_else(|| Error::Inconsistent("solve_finite needs a finite horizon".into()))?;
        let mut slices: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_max);
        let mut law_slices: Vec<Vec<LocalLaw>> = Vec::with_capacity(t_max);
        let mut entries: Vec<FpNodeReport> = Vec::new();
        let mut next: Option<Vec<Vec<f64>>> = None;
        for t in (1..=t_max).rev() {
            let (values, laws, mut reports) = self.sweep(t, next.as_deref(), 1.0)?;
            next = Some(values.clone());
            slices.push(values);
            law_slices.push(laws);
            entries.append(&mut reports);
        }
        slices.reverse();
        law_slices.reverse();
        entries.sort_by_key(|e| e.t);
        Ok(DssSolution {
            strategy: EquilibriumStrategy {
                mode: StrategyMode::Finite,
                n: self.spec.n,
                simplex: self.simplex.clone(),
                laws: law_slices,
            },
            values: ValueTable {
                mode: StrategyMode::Finite,
                simplex: self.simplex.clone(),
                slices,
            },
            report: FixedPointReport { entries },
            discounted: None,
        })
    }

    /// Discounted value iteration to a stationary equilibrium.
    pub fn solve_discounted(&self) -> Result<DssSolution> {
        let beta = self.spec.horizon.beta().ok_or_else(|| {
            Error::Inconsistent("solve_discounted needs a discounted horizon".into())
        })?;
        let nx = self.spec.num_states();
        let stop = self.params.vi_tolerance * (1.0 - beta) / (2.0 * beta);
        let mut values = self.zero_slice(nx);
        let mut deltas = Vec::new();
        let mut converged = false;
        while deltas.len() < self.params.max_sweeps {
            let (next, _, _) = self.sweep(1, Some(&values), beta)?;
            let delta = slice_sup_diff(&next, &values);
            values = next;
            deltas.push(delta);
            if delta <= stop {
                converged = true;
                break;
            }
        }
        // Extraction sweep: stationary laws are the node fixed points at
        // the converged table; its sweep difference is the Bellman residual.
        let (final_values, laws, mut entries) = self.sweep(1, Some(&values), beta)?;
        let bellman_residual = slice_sup_diff(&final_values, &values);
        for e in &mut entries {
            e.t = 1;
        }
        Ok(DssSolution {
            strategy: EquilibriumStrategy {
                mode: StrategyMode::StationaryDiscounted,
                n: self.spec.n,
                simplex: self.simplex.clone(),
                laws: vec![laws],
            },
            values: ValueTable {
                mode: StrategyMode::StationaryDiscounted,
                simplex: self.simplex.clone(),
                slices: vec![final_values],
            },
            report: FixedPointReport { entries },
            discounted: Some(DiscountedInfo {
                sweeps: deltas.len(),
                sweep_deltas: deltas,
                bellman_residual,
                converged,
            }),
        })
    }

    /// First `num_sweeps` value-iteration tables, starting from zero.
    /// `trace[k]` is the table after `k + 1` sweeps.
    pub fn value_iteration_trace(&self, num_sweeps: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let beta = self
            .spec
            .horizon
            .beta()
            .ok_or_else(|| Error::Inconsistent("trace needs a discounted horizon".into()))?;
        let mut values = self.zero_slice(self.spec.num_states());
        let mut trace = Vec::with_capacity(num_sweeps);
        for _ in 0..num_sweeps {
            let (next, _, _) = self.sweep(1, Some(&values), beta)?;
            values = next;
            trace.push(values.clone());
        }
        Ok(trace)
    }

    fn zero_slice(&self, nx: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; nx]; self.simplex.len()]
    }

    /// One backward step at stage `t`: solves the fixed point at every
    /// lattice node against the `next` value slice (`None` = terminal).
    /// Nodes are independent given the frozen slice and run in parallel.
    fn sweep(
        &self,
        t: Stage,
        next: Option<&[Vec<f64>]>,
        discount: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<LocalLaw>, Vec<FpNodeReport>)> {
        let nx = self.spec.num_states();
        let results: Result<Vec<_>> = (0..self.simplex.len())
            .into_par_iter()
            .map(|d_idx| {
                let d = DeepState::new(self.simplex.node(d_idx).to_vec());
                let obj = NodeObjective::new(self, t, &d, next, discount)?;
                let stage_params = StageParams {
                    tolerance: self.params.fp_tolerance,
                    max_iters: self.params.max_iters,
                };
                let sol = solve_stage_fixed_point(&obj, stage_params)?;
                let multiple = if self.params.check_uniqueness {
                    let alt_init = LocalLaw::pure(&vec![0; nx], self.spec.num_actions());
                    let alt = solve_from(&obj, stage_params, alt_init)?;
                    if sol.converged && alt.converged {
                        Some(sol.law.max_abs_diff(&alt.law) > 1e-6)
                    } else {
                        None
                    }
                } else {
                    None
                };
                let mut values = vec![f64::NAN; nx];
                for (i, &x) in obj.active.iter().enumerate() {
                    values[x] = sol.values[i];
                }
                let report = FpNodeReport {
                    t,
                    d_counts: d.counts().to_vec(),
                    iterations: sol.iterations,
                    residual: sol.residual,
                    converged: sol.converged,
                    multiple_equilibria: multiple,
                };
                Ok((values, sol.law, report))
            })
            .collect();
        let mut values = Vec::with_capacity(self.simplex.len());
        let mut laws = Vec::with_capacity(self.simplex.len());
        let mut reports = Vec::with_capacity(self.simplex.len());
        for (v, l, r) in results? {
            values.push(v);
            laws.push(l);
            reports.push(r);
        }
        Ok((values, laws, reports))
    }

    /// Minimizing pure actions and minimal values per occupied state, for a
    /// fixed population law and continuation slice.
    pub fn best_response_rows(
        &self,
        t: Stage,
        d: &DeepState,
        others_law: &LocalLaw,
        next: Option<&StageValues>,
    ) -> Result<Vec<BestResponseRow>> {
        let obj = NodeObjective::new(self, t, d, next.map(Vec::as_slice), self.spec.discount())?;
        let a = obj.action_values(others_law, true)?;
        Ok(obj
            .active
            .iter()
            .zip(&a)
            .map(|(&x, row)| {
                let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let tie = 1e-12 * row.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                BestResponseRow {
                    state: x,
                    actions: (0..row.len()).filter(|&u| row[u] - min <= tie).collect(),
                    value: min,
                }
            })
            .collect())
    }

    /// Solves the equilibrium fixed point at a single node.
    pub fn fixed_point_stage(
        &self,
        t: Stage,
        d: &DeepState,
        next: Option<&StageValues>,
    ) -> Result<(LocalLaw, FpNodeReport)> {
        let obj = NodeObjective::new(self, t, d, next.map(Vec::as_slice), self.spec.discount())?;
        let sol = solve_stage_fixed_point(
            &obj,
            StageParams {
                tolerance: self.params.fp_tolerance,
                max_iters: self.params.max_iters,
            },
        )?;
        Ok((
            sol.law.clone(),
            FpNodeReport {
                t,
                d_counts: d.counts().to_vec(),
                iterations: sol.iterations,
                residual: sol.residual,
                converged: sol.converged,
                multiple_equilibria: None,
            },
        ))
    }

    /// Sequential-rationality audit of a finite-horizon strategy, or the
    /// stationary one-shot analog for discounted strategies.
    pub fn exploitability_audit(&self, strategy: &EquilibriumStrategy) -> Result<AuditReport> {
        match strategy.mode {
            StrategyMode::Finite => self.audit_finite(strategy),
            StrategyMode::StationaryDiscounted => self.audit_stationary(strategy),
        }
    }

    fn audit_finite(&self, strategy: &EquilibriumStrategy) -> Result<AuditReport> {
        let t_max = self
            .spec
            .horizon
            .stages()
            .ok_or_else(|| Error::Inconsistent("finite audit needs a finite horizon".into()))?;
        if strategy.stages() < t_max {
            return Err(Error::Inconsistent(format!(
                "strategy covers {} stages, horizon needs {t_max}",
                strategy.stages()
            )));
        }
        let nx = self.spec.num_states();
        let mut dev_next: Option<Vec<Vec<f64>>> = None;
        let mut on_next: Option<Vec<Vec<f64>>> = None;
        let mut per_stage = vec![0.0f64; t_max];
        let mut worst = (f64::NEG_INFINITY, 0usize, Vec::new(), 0usize);
        for t in (1..=t_max).rev() {
            let step: Result<Vec<_>> = (0..self.simplex.len())
                .into_par_iter()
                .map(|d_idx| {
                    let d = DeepState::new(self.simplex.node(d_idx).to_vec());
                    let law = strategy.law(t, &d)?;
                    let dev_obj = NodeObjective::new(self, t, &d, dev_next.as_deref(), 1.0)?;
                    let a_dev = dev_obj.action_values(law, true)?;
                    let on_obj = NodeObjective::new(self, t, &d, on_next.as_deref(), 1.0)?;
                    let a_on = on_obj.action_values(law, true)?;
                    let mut dev_vals = vec![f64::NAN; nx];
                    let mut on_vals = vec![f64::NAN; nx];
                    let mut node_worst = (f64::NEG_INFINITY, 0usize);
                    for (i, &x) in dev_obj.active.iter().enumerate() {
                        let best = a_dev[i].iter().cloned().fold(f64::INFINITY, f64::min);
                        let on = law.row(x).iter().zip(&a_on[i]).map(|(w, v)| w * v).sum::<f64>();
                        dev_vals[x] = best;
                        on_vals[x] = on;
                        let gain = on - best;
                        if gain > node_worst.0 {
                            node_worst = (gain, x);
                        }
                    }
                    Ok((dev_vals, on_vals, node_worst))
                })
                .collect();
            let mut dev_slice = Vec::with_capacity(self.simplex.len());
            let mut on_slice = Vec::with_capacity(self.simplex.len());
            for (d_idx, (dv, ov, node_worst)) in step?.into_iter().enumerate() {
                per_stage[t - 1] = per_stage[t - 1].max(node_worst.0);
                if node_worst.0 > worst.0 {
                    worst = (
                        node_worst.0,
                        t,
                        self.simplex.node(d_idx).to_vec(),
                        node_worst.1,
                    );
                }
                dev_slice.push(dv);
                on_slice.push(ov);
            }
            dev_next = Some(dev_slice);
            on_next = Some(on_slice);
        }
        Ok(AuditReport {
            max_gain: worst.0,
            worst_stage: worst.1,
            worst_d_counts: worst.2,
            worst_state: worst.3,
            per_stage,
        })
    }

    /// Stationary audit: policy-evaluates the on-path value of the frozen
    /// strategy and solves the deviator's discounted MDP against it, both
    /// by fixed-policy value iteration with the solver's stopping rule.
    fn audit_stationary(&self, strategy: &EquilibriumStrategy) -> Result<AuditReport> {
        let beta = self.spec.horizon.beta().ok_or_else(|| {
            Error::Inconsistent("stationary audit needs a discounted horizon".into())
        })?;
        let nx = self.spec.num_states();
        let stop = self.params.vi_tolerance * (1.0 - beta) / (2.0 * beta);
        let mut dev = self.zero_slice(nx);
        let mut on = self.zero_slice(nx);
        for _ in 0..self.params.max_sweeps {
            let step: Result<Vec<_>> = (0..self.simplex.len())
                .into_par_iter()
                .map(|d_idx| {
                    let d = DeepState::new(self.simplex.node(d_idx).to_vec());
                    let law = strategy.law(1, &d)?;
                    let dev_obj = NodeObjective::new(self, 1, &d, Some(&dev), beta)?;
                    let a_dev = dev_obj.action_values(law, true)?;
                    let on_obj = NodeObjective::new(self, 1, &d, Some(&on), beta)?;
                    let a_on = on_obj.action_values(law, true)?;
                    let mut dv = vec![f64::NAN; nx];
                    let mut ov = vec![f64::NAN; nx];
                    for (i, &x) in dev_obj.active.iter().enumerate() {
                        dv[x] = a_dev[i].iter().cloned().fold(f64::INFINITY, f64::min);
                        ov[x] = law.row(x).iter().zip(&a_on[i]).map(|(w, v)| w * v).sum();
                    }
                    Ok((dv, ov))
                })
                .collect();
            let mut dev_slice = Vec::with_capacity(self.simplex.len());
            let mut on_slice = Vec::with_capacity(self.simplex.len());
            for (dv, ov) in step? {
                dev_slice.push(dv);
                on_slice.push(ov);
            }
            let delta = slice_sup_diff(&dev_slice, &dev).max(slice_sup_diff(&on_slice, &on));
            dev = dev_slice;
            on = on_slice;
            if delta <= stop {
                break;
            }
        }
        let mut worst = (f64::NEG_INFINITY, 1usize, Vec::new(), 0usize);
        for d_idx in 0..self.simplex.len() {
            for x in 0..nx {
                if dev[d_idx][x].is_nan() {
                    continue;
                }
                let gain = on[d_idx][x] - dev[d_idx][x];
                if gain > worst.0 {
                    worst = (gain, 1, self.simplex.node(d_idx).to_vec(), x);
                }
            }
        }
        Ok(AuditReport {
            max_gain: worst.0,
            worst_stage: worst.1,
            worst_d_counts: worst.2,
            worst_state: worst.3,
            per_stage: vec![worst.0],
        })
    }
}

fn slice_sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut m = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (va, vb) in ra.iter().zip(rb) {
            if va.is_nan() || vb.is_nan() {
                continue;
            }
            m = m.max((va - vb).abs());
        }
    }
    m
}

/// Expected equilibrium cost of a generic player before the initial draw:
/// initial states are i.i.d. from the spec's initial distribution, so the
/// lattice weight is multinomial and the player's own state is a draw
/// from the realized empirical distribution.
pub fn expected_population_value(spec: &GameSpec, values: &ValueTable) -> f64 {
    let n = spec.n as u32;
    let mut total = 0.0;
    for (counts, p) in multinomial_pmf(n, &spec.initial_dist) {
        if p == 0.0 {
            continue;
        }
        let idx = values
            .simplex
            .index_of(&counts)
            .expect("initial draw on lattice");
        let slice = values.stage_slice(1);
        for (x, &c) in counts.iter().enumerate() {
            if c > 0 {
                total += p * c as f64 / n as f64 * slice[idx][x];
            }
        }
    }
    total
}

/// Stage objective of one `(t, d)` node: expected stage cost plus
/// discounted continuation through the exact next-deep-state law.
struct NodeObjective<'s> {
    solver: &'s DssSolver<'s>,
    t: Stage,
    active: Vec<usize>,
    others: Vec<OthersDeepState>,
    /// `kernel_rows[x][u][y]` at the node's `d`.
    kernel_rows: Vec<Vec<Vec<f64>>>,
    next: Option<&'s [Vec<f64>]>,
    discount: f64,
    cost: NodeCost,
}

enum NodeCost {
    /// `table[active_i][u]`, independent of the population law.
    DOnly { table: Vec<Vec<f64>> },
    /// Both separable terms at the node's `d`, full state range.
    Separable {
        noncoop: Vec<Vec<f64>>,
        coop: Vec<Vec<f64>>,
    },
    General,
}

impl<'s> NodeObjective<'s> {
    fn new(
        solver: &'s DssSolver<'s>,
        t: Stage,
        d: &DeepState,
        next: Option<&'s [Vec<f64>]>,
        discount: f64,
    ) -> Result<Self> {
        let spec = solver.spec;
        let nx = spec.num_states();
        let nu = spec.num_actions();
        let d_probs = d.probs();
        let active: Vec<usize> = (0..nx).filter(|&x| d.count(x) > 0).collect();
        let others: Vec<OthersDeepState> = active
            .iter()
            .map(|&x| others_from_full(d, x))
            .collect::<Result<_>>()?;
        let kernel_rows: Vec<Vec<Vec<f64>>> = (0..nx)
            .map(|x| (0..nu).map(|u| spec.kernel.row(t, x, u, &d_probs)).collect())
            .collect();
        let cost = match spec.cost.coupling_class() {
            CouplingClass::DOnly => NodeCost::DOnly {
                table: active
                    .iter()
                    .map(|&x| {
                        (0..nu)
                            .map(|u| spec.cost.eval_marginal(t, x, u, &d_probs, spec.n))
                            .collect()
                    })
                    .collect(),
            },
            CouplingClass::Separable => {
                let (noncoop, coop) = spec.cost.separable_parts().expect("separable");
                NodeCost::Separable {
                    noncoop: (0..nx)
                        .map(|x| {
                            (0..nu)
                                .map(|u| spec.cost.eval_part(noncoop, t, x, u, &d_probs, spec.n))
                                .collect()
                        })
                        .collect(),
                    coop: (0..nx)
                        .map(|x| {
                            (0..nu)
                                .map(|u| spec.cost.eval_part(coop, t, x, u, &d_probs, spec.n))
                                .collect()
                        })
                        .collect(),
                }
            }
            CouplingClass::GeneralInD => NodeCost::General,
        };
        Ok(Self {
            solver,
            t,
            active,
            others,
            kernel_rows,
            next,
            discount,
            cost,
        })
    }

    /// Stage-cost rows `l_t(x, d, delta_u, law)` for every active state.
    fn stage_cost_rows(&self, law: &LocalLaw) -> Result<Vec<Vec<f64>>> {
        let spec = self.solver.spec;
        let nu = spec.num_actions();
        let n = spec.n as f64;
        match &self.cost {
            NodeCost::DOnly { table } => Ok(table.clone()),
            NodeCost::Separable { noncoop, coop } => Ok(self
                .active
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    // Average cooperative cost over the other players.
                    let mut pop = 0.0;
                    for (xp, &k) in self.others[i].counts().iter().enumerate() {
                        if k == 0 {
                            continue;
                        }
                        for (up, &w) in law.row(xp).iter().enumerate() {
                            if w != 0.0 {
                                pop += k as f64 / n * w * coop[xp][up];
                            }
                        }
                    }
                    (0..nu)
                        .map(|u| noncoop[x][u] + pop + coop[x][u] / n)
                        .collect()
                })
                .collect()),
            NodeCost::General => self
                .active
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let splits = crate::dynamics::joint_action_pmf(
                        &self.others[i],
                        law,
                        self.solver.params.support_cap,
                    )?;
                    let mut row = vec![0.0; nu];
                    for (split, p) in splits.iter() {
                        if p == 0.0 {
                            continue;
                        }
                        for (u, r) in row.iter_mut().enumerate() {
                            let mut dd: Vec<Vec<f64>> = split
                                .counts
                                .iter()
                                .map(|cs| cs.iter().map(|&c| c as f64 / n).collect())
                                .collect();
                            dd[x][u] += 1.0 / n;
                            *r += p * spec.cost.eval(self.t, x, u, &dd, spec.n);
                        }
                    }
                    Ok(row)
                })
                .collect(),
        }
    }
}

impl StageObjective for NodeObjective<'_> {
    fn num_states(&self) -> usize {
        self.solver.spec.num_states()
    }

    fn num_actions(&self) -> usize {
        self.solver.spec.num_actions()
    }

    fn active_states(&self) -> &[usize] {
        &self.active
    }

    fn action_values(&self, law: &LocalLaw, reusable: bool) -> Result<Vec<Vec<f64>>> {
        let nx = self.num_states();
        let nu = self.num_actions();
        let mut a = self.stage_cost_rows(law)?;
        let Some(next) = self.next else {
            return Ok(a);
        };
        let binary = nx == 2;
        for (i, &x) in self.active.iter().enumerate() {
            let pmf = self
                .solver
                .engine
                .next_deep_pmf(self.t, x, &self.others[i], law, reusable)?;
            // g[y]: expected continuation if the player itself lands on y.
            let mut g = vec![0.0; nx];
            for (counts, p) in pmf.iter() {
                if p == 0.0 {
                    continue;
                }
                if binary {
                    // Lattice index of a binary count vector is its first
                    // coordinate.
                    let c0 = counts[0] as usize;
                    g[0] += p * next[c0 + 1][0];
                    g[1] += p * next[c0][1];
                } else {
                    let mut composed = counts.clone();
                    for (y, gy) in g.iter_mut().enumerate() {
                        composed[y] += 1;
                        let idx = self
                            .solver
                            .simplex
                            .index_of(&composed)
                            .expect("composed state on lattice");
                        *gy += p * next[idx][y];
                        composed[y] -= 1;
                    }
                }
            }
            for (u, au) in a[i].iter_mut().enumerate().take(nu) {
                let mut cont = 0.0;
                for (y, &gy) in g.iter().enumerate() {
                    cont += self.kernel_rows[x][u][y] * gy;
                }
                *au += self.discount * cont;
            }
        }
        Ok(a)
    }
}

/// Serialized strategy-and-values interchange layout.
#[derive(Debug, Serialize, Deserialize)]
pub struct StrategyFile {
    pub mode: StrategyMode,
    pub n: usize,
    pub stages: usize,
    pub entries: Vec<StrategyEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StrategyEntry {
    pub t: Stage,
    pub d_counts: Vec<u32>,
    pub law: Vec<Vec<f64>>,
    pub value_by_state: Vec<Option<f64>>,
}

impl DssSolution {
    /// Serializes the strategy and value tables together.
    pub fn to_file(&self) -> StrategyFile {
        let mut entries = Vec::new();
        for (ti, laws) in self.strategy.laws.iter().enumerate() {
            let t = ti + 1;
            for (d_idx, law) in laws.iter().enumerate() {
                let values = &self.values.slices[ti][d_idx];
                entries.push(StrategyEntry {
                    t,
                    d_counts: self.strategy.simplex.node(d_idx).to_vec(),
                    law: law.rows().to_vec(),
                    value_by_state: values
                        .iter()
                        .map(|v| if v.is_nan() { None } else { Some(*v) })
                        .collect(),
                });
            }
        }
        StrategyFile {
            mode: self.strategy.mode,
            n: self.strategy.n,
            stages: self.strategy.laws.len(),
            entries,
        }
    }
}

impl StrategyFile {
    /// Rebuilds the strategy and value table.
    pub fn into_solution_parts(self) -> Result<(EquilibriumStrategy, ValueTable)> {
        let nx = self
            .entries
            .first()
            .map(|e| e.d_counts.len())
            .ok_or_else(|| Error::Inconsistent("strategy file has no entries".into()))?;
        let simplex = CountSimplex::enumerate(self.n as u32, nx, usize::MAX)?;
        let nu = self
            .entries
            .first()
            .map(|e| e.law.first().map_or(1, Vec::len))
            .unwrap_or(1);
        let mut laws = vec![vec![LocalLaw::uniform(nx, nu); simplex.len()]; self.stages];
        let mut slices = vec![vec![vec![f64::NAN; nx]; simplex.len()]; self.stages];
        for e in self.entries {
            let idx = simplex.index_of(&e.d_counts).ok_or_else(|| {
                Error::Inconsistent(format!(
                    "counts {:?} not on the n={} lattice",
                    e.d_counts, self.n
                ))
            })?;
            let law = LocalLaw::new(e.law)?;
            laws[e.t - 1][idx] = law;
            slices[e.t - 1][idx] = e
                .value_by_state
                .into_iter()
                .map(|v| v.unwrap_or(f64::NAN))
                .collect();
        }
        Ok((
            EquilibriumStrategy {
                mode: self.mode,
                n: self.n,
                simplex: simplex.clone(),
                laws,
            },
            ValueTable {
                mode: self.mode,
                simplex,
                slices,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_example1_with, ActionSpace, CostSpec, StateCost, StateSpace, TransitionKernel,
    };

    fn constant_cost_spec(t: usize, c0: f64) -> GameSpec {
        GameSpec {
            states: StateSpace::numbered(2),
            actions: ActionSpace::numbered(2),
            n: 3,
            horizon: Horizon::Finite { t },
            kernel: TransitionKernel::tabular(vec![
                vec![vec![0.6, 0.4], vec![0.3, 0.7]],
                vec![vec![0.5, 0.5], vec![0.8, 0.2]],
            ]),
            cost: CostSpec::d_only(StateCost::Tabular {
                values: vec![vec![vec![c0; 2], vec![c0; 2]]],
            }),
            initial_dist: vec![0.5, 0.5],
        }
    }

    #[test]
    fn constant_cost_one_stage_value_is_the_constant() {
        let spec = constant_cost_spec(1, 2.5);
        let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
        let sol = solver.solve_finite().unwrap();
        assert!(sol.report.all_converged());
        for d_idx in 0..solver.simplex().len() {
            let d = DeepState::new(solver.simplex().node(d_idx).to_vec());
            for x in 0..2 {
                if d.count(x) > 0 {
                    assert!((sol.values.get(1, &d, x).unwrap() - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_cost_discounted_value_is_geometric_sum() {
        let mut spec = constant_cost_spec(1, 2.0);
        spec.horizon = Horizon::Discounted { beta: 0.9 };
        let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
        let sol = solver.solve_discounted().unwrap();
        let info = sol.discounted.as_ref().unwrap();
        assert!(info.converged);
        assert!(info.bellman_residual <= 1e-8);
        let expected = 2.0 / (1.0 - 0.9);
        let d = DeepState::new(vec![2, 1]);
        for x in 0..2 {
            assert!((sol.values.get(1, &d, x).unwrap() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn near_zero_discount_is_myopic() {
        let spec = build_example1_with(4, 1.0, 3.0, Horizon::Discounted { beta: 1e-6 });
        let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
        let sol = solver.solve_discounted().unwrap();
        // d = (4,0): zero requests, below alpha = 1 -> underload fee 5.
        let d = DeepState::new(vec![4, 0]);
        let v = sol.values.get(1, &d, 0).unwrap();
        assert!((v - 5.0).abs() < 1e-4, "v = {v}");
    }

    #[test]
    fn strategy_file_roundtrip() {
        let spec = constant_cost_spec(2, 1.0);
        let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
        let sol = solver.solve_finite().unwrap();
        let text = serde_json::to_string(&sol.to_file()).unwrap();
        let file: StrategyFile = serde_json::from_str(&text).unwrap();
        let (strategy, values) = file.into_solution_parts().unwrap();
        let d = DeepState::new(vec![1, 2]);
        assert_eq!(
            strategy.law(2, &d).unwrap().rows(),
            sol.strategy.law(2, &d).unwrap().rows()
        );
        assert_eq!(
            values.get(1, &d, 1).unwrap(),
            sol.values.get(1, &d, 1).unwrap()
        );
    }

    #[test]
    fn audit_of_solved_strategy_is_tiny() {
        let spec = build_example1_with(5, 1.0, 4.0, Horizon::Finite { t: 3 });
        let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
        let sol = solver.solve_finite().unwrap();
        assert!(sol.report.all_converged());
        let audit = solver.exploitability_audit(&sol.strategy).unwrap();
        assert!(audit.max_gain >= -1e-9);
        assert!(audit.max_gain <= 1e-6, "gain {}", audit.max_gain);
    }

    #[test]
    fn audit_detects_planted_deviation() {
        let spec = build_example1_with(5, 1.0, 4.0, Horizon::Finite { t: 3 });
        let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
        let sol = solver.solve_finite().unwrap();
        let mut worst_gain = 0.0f64;
        // Perturb one node at a time toward a fixed pure row; at least one
        // perturbation must open a strictly positive gain.
        for d_counts in [[5, 0], [0, 5], [2, 3]] {
            let d = DeepState::new(d_counts.to_vec());
            for forced in 0..spec.num_actions() {
                let mut strategy = sol.strategy.clone();
                let law = LocalLaw::pure(&vec![forced; 2], spec.num_actions());
                strategy.set_law(1, &d, law).unwrap();
                let audit = solver.exploitability_audit(&strategy).unwrap();
                worst_gain = worst_gain.max(audit.max_gain);
            }
        }
        assert!(worst_gain > 1e-6, "no perturbation opened a gain: {worst_gain}");
    }
}
