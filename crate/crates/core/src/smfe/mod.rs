//! Sequential mean-field equilibrium under the no-sharing information
//! structure: players observe only their own state.
//!
//! In the infinite-population limit the deep state becomes the
//! deterministic mean field `m_t`, propagated by
//! `m_{t+1}(y) = sum_x m_t(x) T_t(y, x, law(x), m_t)`. The value function
//! `V(x, m)` is solved by backward induction (or discounted value
//! iteration) over a quantized simplex: continuation values are read at
//! the L1-nearest grid node of the propagated flow, never interpolated,
//! because the solution need not be continuous in `m`.
//!
//! The no-sharing strategy pairs the solved law map with the exact
//! (unprojected) forward flow from the initial distribution: every player
//! can reproduce `m_1..m_T` on its own, and because the law map is in
//! state-feedback form a common belief shock at any stage just restarts
//! the flow from the shocked point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dss::{
    solve_stage_fixed_point, DiscountedInfo, FixedPointReport, FpNodeReport, SolverParams,
    StageObjective, StageParams,
};
use crate::dynamics::{count_nodes, mean_field_step, CountSimplex};
use crate::error::{Error, Result};
use crate::model::{CouplingClass, GameSpec, LocalLaw, Stage};

/// Quantized probability simplex: all vectors with entries in
/// `{0, 1/k, ..., 1}` summing to one, canonically ordered.
#[derive(Debug, Clone)]
pub struct SimplexGrid {
    resolution: u32,
    lattice: CountSimplex,
    /// Node probability vectors, precomputed.
    nodes: Vec<Vec<f64>>,
}

impl SimplexGrid {
    pub fn build(state_count: usize, resolution: u32, cap: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Inconsistent("grid resolution must be >= 1".into()));
        }
        let lattice = CountSimplex::enumerate(resolution, state_count, cap)?;
        let nodes = (0..lattice.len()).map(|i| lattice.probs(i)).collect();
        Ok(Self {
            resolution,
            lattice,
            nodes,
        })
    }

    /// Default resolution targeting an `n`-player deployment: ten grid
    /// steps per `1/sqrt(n)` quantization level.
    pub fn default_resolution(n_target: usize) -> u32 {
        ((n_target as f64).sqrt().ceil() as u32) * 10
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i]
    }

    pub fn expected_len(state_count: usize, resolution: u32) -> u128 {
        count_nodes(resolution, state_count)
    }

    /// Index of the L1-nearest node; ties go to the earlier node in
    /// canonical order.
    pub fn project(&self, m: &[f64]) -> usize {
        if m.len() == 2 {
            // Binary fast path: node i has first coordinate i / k.
            let k = self.resolution as f64;
            let lo = (m[0] * k).floor().clamp(0.0, k) as usize;
            let hi = (lo + 1).min(self.resolution as usize);
            let d_lo = (m[0] - lo as f64 / k).abs();
            let d_hi = (m[0] - hi as f64 / k).abs();
            return if d_lo <= d_hi { lo } else { hi };
        }
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, node) in self.nodes.iter().enumerate() {
            let dist: f64 = node.iter().zip(m).map(|(a, b)| (a - b).abs()).sum();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        best
    }
}

/// Solved infinite-population value and law maps over the grid.
#[derive(Debug, Clone)]
pub struct MeanFieldValue {
    pub grid: SimplexGrid,
    /// `values[t-1][node][x]`; single slice in discounted mode.
    pub values: Vec<Vec<Vec<f64>>>,
    /// `laws[t-1][node]`; single slice in discounted mode.
    pub laws: Vec<Vec<LocalLaw>>,
    pub stationary: bool,
}

impl MeanFieldValue {
    fn law_at(&self, t: Stage, node: usize) -> &LocalLaw {
        let slice = if self.stationary { 0 } else { t - 1 };
        &self.laws[slice][node]
    }

    /// `V(x, project(m))` at stage `t`.
    pub fn value(&self, t: Stage, m: &[f64], x: usize) -> f64 {
        let slice = if self.stationary { 0 } else { t - 1 };
        self.values[slice][self.grid.project(m)][x]
    }
}

/// No-sharing strategy: the deterministic mean-field trajectory and the
/// per-stage local laws read off it. Serializable as
/// `{m_trajectory, laws, grid_resolution, residuals}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NsStrategy {
    pub m_trajectory: Vec<Vec<f64>>,
    pub laws: Vec<LocalLaw>,
    pub grid_resolution: u32,
    /// Fixed-point residuals of the visited grid nodes.
    pub residuals: Vec<f64>,
}

impl NsStrategy {
    pub fn stages(&self) -> usize {
        self.laws.len()
    }

    pub fn law(&self, t: Stage) -> Result<&LocalLaw> {
        self.laws.get(t - 1).ok_or(Error::StrategyGap {
            stage: t,
            counts: vec![],
        })
    }

    /// Replaces stages `tail.start_stage..` with the shocked tail.
    pub fn spliced(&self, tail: &NsTail) -> NsStrategy {
        let cut = tail.start_stage - 1;
        let mut out = self.clone();
        out.m_trajectory.truncate(cut);
        out.laws.truncate(cut);
        out.residuals.truncate(cut.min(out.residuals.len()));
        out.m_trajectory.extend(tail.m_trajectory.iter().cloned());
        out.laws.extend(tail.laws.iter().cloned());
        out.residuals.extend(tail.residuals.iter().cloned());
        out
    }
}

/// Recomputed trajectory and laws from a shocked belief onward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NsTail {
    pub start_stage: Stage,
    pub m_trajectory: Vec<Vec<f64>>,
    pub laws: Vec<LocalLaw>,
    pub residuals: Vec<f64>,
}

/// Output of a no-sharing solve.
#[derive(Debug, Clone)]
pub struct SmfeSolution {
    pub value: MeanFieldValue,
    pub ns: NsStrategy,
    pub report: FixedPointReport,
    pub discounted: Option<DiscountedInfo>,
}

impl SmfeSolution {
    /// Restarts the forward pass from a shocked common belief at stage
    /// `t_shock`, reading laws from the stored state-feedback map.
    pub fn belief_shock(&self, spec: &GameSpec, t_shock: Stage, m_shock: &[f64]) -> Result<NsTail> {
        let t_max = self.ns.stages();
        if t_shock == 0 || t_shock > t_max {
            return Err(Error::Inconsistent(format!(
                "shock stage {t_shock} outside 1..={t_max}"
            )));
        }
        let mut m = m_shock.to_vec();
        let mut trajectory = Vec::with_capacity(t_max - t_shock + 1);
        let mut laws = Vec::with_capacity(t_max - t_shock + 1);
        let mut residuals = Vec::new();
        for t in t_shock..=t_max {
            let node = self.value.grid.project(&m);
            let law = self.value.law_at(t, node).clone();
            trajectory.push(m.clone());
            m = mean_field_step(spec, t, &m, &law);
            laws.push(law);
            residuals.push(self.node_residual(t, node));
        }
        Ok(NsTail {
            start_stage: t_shock,
            m_trajectory: trajectory,
            laws,
            residuals,
        })
    }

    fn node_residual(&self, t: Stage, node: usize) -> f64 {
        let slice = if self.value.stationary { 0 } else { t - 1 };
        self.report
            .entries
            .get(slice * self.value.grid.len() + node)
            .map_or(f64::NAN, |e| e.residual)
    }
}

/// No-sharing solver bound to one game and grid.
pub struct SmfeSolver<'a> {
    pub spec: &'a GameSpec,
    pub params: SolverParams,
    grid: SimplexGrid,
}

impl<'a> SmfeSolver<'a> {
    pub fn new(spec: &'a GameSpec, grid: SimplexGrid, params: SolverParams) -> Self {
        Self { spec, params, grid }
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    /// Finite-horizon backward sweep plus exact forward pass.
    pub fn solve_finite(&self) -> Result<SmfeSolution> {
        let t_max = self
            .spec
            .horizon
            .stages()
            .ok_or_else(|| Error::Inconsistent("solve_finite needs a finite horizon".into()))?;
        let mut values: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_max);
        let mut laws: Vec<Vec<LocalLaw>> = Vec::with_capacity(t_max);
        let mut entries = Vec::new();
        let mut next: Option<Vec<Vec<f64>>> = None;
        for t in (1..=t_max).rev() {
            let (v, l, mut r) = self.sweep(t, next.as_deref(), 1.0)?;
            next = Some(v.clone());
            values.push(v);
            laws.push(l);
            entries.append(&mut r);
        }
        values.reverse();
        laws.reverse();
        entries.sort_by_key(|e| e.t);
        let value = MeanFieldValue {
            grid: self.grid.clone(),
            values,
            laws,
            stationary: false,
        };
        let report = FixedPointReport { entries };
        let ns = self.forward_pass(&value, &report, 1, t_max)?;
        Ok(SmfeSolution {
            value,
            ns,
            report,
            discounted: None,
        })
    }

    /// Discounted value iteration over `(state, grid node)`, then a
    /// truncated non-stationary forward pass of `trunc_t` stages.
    ///
    /// `trunc_t = None` derives the truncation from the geometric tail:
    /// the smallest `T` with `beta^T * cost_bound / (1 - beta) <= tail_tol`.
    pub fn solve_discounted(&self, trunc_t: Option<usize>, tail_tol: f64) -> Result<SmfeSolution> {
        let beta = self.spec.horizon.beta().ok_or_else(|| {
            Error::Inconsistent("solve_discounted needs a discounted horizon".into())
        })?;
        let nx = self.spec.num_states();
        let stop = self.params.vi_tolerance * (1.0 - beta) / (2.0 * beta);
        let mut values = vec![vec![0.0; nx]; self.grid.len()];
        let mut deltas = Vec::new();
        let mut converged = false;
        while deltas.len() < self.params.max_sweeps {
            let (next, _, _) = self.sweep(1, Some(&values), beta)?;
            let delta = sup_diff(&next, &values);
            values = next;
            deltas.push(delta);
            if delta <= stop {
                converged = true;
                break;
            }
        }
        let (final_values, final_laws, mut entries) = self.sweep(1, Some(&values), beta)?;
        let bellman_residual = sup_diff(&final_values, &values);
        for e in &mut entries {
            e.t = 1;
        }
        let value = MeanFieldValue {
            grid: self.grid.clone(),
            values: vec![final_values],
            laws: vec![final_laws],
            stationary: true,
        };
        let report = FixedPointReport { entries };
        let t_trunc = match trunc_t {
            Some(t) => t,
            None => {
                let bound = crate::bounds::estimate_cost_bound(self.spec, 64, 0x5eed);
                truncation_stages(beta, bound, tail_tol)
            }
        };
        let ns = self.forward_pass(&value, &report, 1, t_trunc)?;
        Ok(SmfeSolution {
            value,
            ns,
            report,
            discounted: Some(DiscountedInfo {
                sweeps: deltas.len(),
                sweep_deltas: deltas,
                bellman_residual,
                converged,
            }),
        })
    }

    /// Exact (unprojected) flow from the initial distribution; laws are
    /// looked up at projected nodes only.
    fn forward_pass(
        &self,
        value: &MeanFieldValue,
        report: &FixedPointReport,
        t_start: Stage,
        t_end: Stage,
    ) -> Result<NsStrategy> {
        let mut m = self.spec.initial_dist.clone();
        let mut trajectory = Vec::with_capacity(t_end - t_start + 1);
        let mut laws = Vec::with_capacity(t_end - t_start + 1);
        let mut residuals = Vec::with_capacity(t_end - t_start + 1);
        for t in t_start..=t_end {
            let node = self.grid.project(&m);
            let slice = if value.stationary { 0 } else { t - 1 };
            let law = value.laws[slice][node].clone();
            trajectory.push(m.clone());
            m = mean_field_step(self.spec, if value.stationary { 1 } else { t }, &m, &law);
            residuals.push(
                report
                    .entries
                    .get(slice * self.grid.len() + node)
                    .map_or(f64::NAN, |e| e.residual),
            );
            laws.push(law);
        }
        Ok(NsStrategy {
            m_trajectory: trajectory,
            laws,
            grid_resolution: self.grid.resolution(),
            residuals,
        })
    }

    fn sweep(
        &self,
        t: Stage,
        next: Option<&[Vec<f64>]>,
        discount: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<LocalLaw>, Vec<FpNodeReport>)> {
        let results: Result<Vec<_>> = (0..self.grid.len())
            .into_par_iter()
            .map(|node| {
                let obj = GridObjective::new(self, t, node, next, discount);
                let sol = solve_stage_fixed_point(
                    &obj,
                    StageParams {
                        tolerance: self.params.fp_tolerance,
                        max_iters: self.params.max_iters,
                    },
                )?;
                let report = FpNodeReport {
                    t,
                    d_counts: self.grid.lattice.node(node).to_vec(),
                    iterations: sol.iterations,
                    residual: sol.residual,
                    converged: sol.converged,
                    multiple_equilibria: None,
                };
                Ok((sol.values, sol.law, report))
            })
            .collect();
        let mut values = Vec::with_capacity(self.grid.len());
        let mut laws = Vec::with_capacity(self.grid.len());
        let mut reports = Vec::with_capacity(self.grid.len());
        for (v, l, r) in results? {
            values.push(v);
            laws.push(l);
            reports.push(r);
        }
        Ok((values, laws, reports))
    }
}

/// Stages needed before the discounted tail drops below `tail_tol`.
pub fn truncation_stages(beta: f64, cost_bound: f64, tail_tol: f64) -> usize {
    if cost_bound <= 0.0 {
        return 1;
    }
    let mut t = 1usize;
    let mut tail = beta * cost_bound / (1.0 - beta);
    while tail > tail_tol && t < 1_000_000 {
        tail *= beta;
        t += 1;
    }
    t
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb))
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Infinite-population stage game at one grid node: stage cost under the
/// product distribution `m x law`, continuation at the projected flow.
struct GridObjective<'s> {
    solver: &'s SmfeSolver<'s>,
    t: Stage,
    m: &'s [f64],
    /// `kernel_rows[x][u][y]` at the node's `m`.
    kernel_rows: Vec<Vec<Vec<f64>>>,
    next: Option<&'s [Vec<f64>]>,
    discount: f64,
    active: Vec<usize>,
}

impl<'s> GridObjective<'s> {
    fn new(
        solver: &'s SmfeSolver<'s>,
        t: Stage,
        node: usize,
        next: Option<&'s [Vec<f64>]>,
        discount: f64,
    ) -> Self {
        let spec = solver.spec;
        let nx = spec.num_states();
        let nu = spec.num_actions();
        let m = solver.grid.node(node);
        let kernel_rows = (0..nx)
            .map(|x| (0..nu).map(|u| spec.kernel.row(t, x, u, m)).collect())
            .collect();
        Self {
            solver,
            t,
            m,
            kernel_rows,
            next,
            discount,
            active: (0..nx).collect(),
        }
    }
}

impl StageObjective for GridObjective<'_> {
    fn num_states(&self) -> usize {
        self.solver.spec.num_states()
    }

    fn num_actions(&self) -> usize {
        self.solver.spec.num_actions()
    }

    fn active_states(&self) -> &[usize] {
        &self.active
    }

    fn action_values(&self, law: &LocalLaw, _reusable: bool) -> Result<Vec<Vec<f64>>> {
        let spec = self.solver.spec;
        let nx = spec.num_states();
        let nu = spec.num_actions();
        let mut a = vec![vec![0.0; nu]; nx];
        match spec.cost.coupling_class() {
            CouplingClass::DOnly => {
                for (x, row) in a.iter_mut().enumerate() {
                    for (u, v) in row.iter_mut().enumerate() {
                        *v = spec.cost.eval_marginal(self.t, x, u, self.m, spec.n);
                    }
                }
            }
            CouplingClass::Separable | CouplingClass::GeneralInD => {
                // The infinite-population joint distribution is exactly
                // m x law; no enumeration needed.
                let mm: Vec<Vec<f64>> = self
                    .m
                    .iter()
                    .enumerate()
                    .map(|(x, &mx)| law.row(x).iter().map(|&p| mx * p).collect())
                    .collect();
                for (x, row) in a.iter_mut().enumerate() {
                    for (u, v) in row.iter_mut().enumerate() {
                        *v = spec.cost.eval(self.t, x, u, &mm, spec.n);
                    }
                }
            }
        }
        if let Some(next) = self.next {
            let flow = mean_field_step(spec, self.t, self.m, law);
            let node = self.solver.grid.project(&flow);
            let cont = &next[node];
            for (x, row) in a.iter_mut().enumerate() {
                for (u, v) in row.iter_mut().enumerate() {
                    let mut c = 0.0;
                    for (y, &vy) in cont.iter().enumerate() {
                        c += self.kernel_rows[x][u][y] * vy;
                    }
                    *v += self.discount * c;
                }
            }
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_example1_with, ActionSpace, CostSpec, Horizon, StateCost, StateSpace,
        TransitionKernel,
    };

    #[test]
    fn grid_enumeration_matches_lattice() {
        let g = SimplexGrid::build(2, 2, 1000).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.node(0), &[0.0, 1.0]);
        assert_eq!(g.node(1), &[0.5, 0.5]);
        assert_eq!(g.node(2), &[1.0, 0.0]);
        assert_eq!(SimplexGrid::build(3, 1, 1000).unwrap().len(), 3);
        assert_eq!(SimplexGrid::build(2, 100, 1000).unwrap().len(), 101);
    }

    #[test]
    fn projection_is_idempotent_and_nearest() {
        let g = SimplexGrid::build(2, 2, 1000).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.project(g.node(i)), i);
        }
        assert_eq!(g.project(&[0.6, 0.4]), 1);
        assert_eq!(g.project(&[0.9, 0.1]), 2);
        // Three-state generic path.
        let g3 = SimplexGrid::build(3, 4, 10_000).unwrap();
        for i in 0..g3.len() {
            assert_eq!(g3.project(g3.node(i)), i);
        }
    }

    #[test]
    fn projection_error_bound() {
        let g = SimplexGrid::build(2, 1000, 100_000).unwrap();
        let m = [0.123456, 0.876544];
        let node = g.node(g.project(&m));
        let l1: f64 = node.iter().zip(m.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 2.0 / (2.0 * 1000.0) + 1e-12);
    }

    #[test]
    fn default_resolution_scales_with_sqrt_n() {
        assert_eq!(SimplexGrid::default_resolution(100), 100);
        assert_eq!(SimplexGrid::default_resolution(101), 110);
    }

    fn flat_cost_spec(t: usize, c0: f64) -> GameSpec {
        GameSpec {
            states: StateSpace::numbered(2),
            actions: ActionSpace::numbered(2),
            n: 10,
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
    fn constant_cost_values_and_mass_conservation() {
        let spec = flat_cost_spec(3, 1.5);
        let grid = SimplexGrid::build(2, 16, 10_000).unwrap();
        let solver = SmfeSolver::new(&spec, grid, SolverParams::default());
        let sol = solver.solve_finite().unwrap();
        assert!(sol.report.all_converged());
        // V_1 = 3 stages of constant cost.
        for node in 0..sol.value.grid.len() {
            for x in 0..2 {
                assert!((sol.value.values[0][node][x] - 4.5).abs() < 1e-12);
            }
        }
        for m in &sol.ns.m_trajectory {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn discounted_constant_cost_is_geometric() {
        let mut spec = flat_cost_spec(1, 2.0);
        spec.horizon = Horizon::Discounted { beta: 0.9 };
        let grid = SimplexGrid::build(2, 8, 10_000).unwrap();
        let solver = SmfeSolver::new(&spec, grid, SolverParams::default());
        let sol = solver.solve_discounted(Some(5), 1e-6).unwrap();
        let info = sol.discounted.as_ref().unwrap();
        assert!(info.converged);
        assert!(info.bellman_residual <= 1e-8);
        for node in 0..sol.value.grid.len() {
            for x in 0..2 {
                assert!((sol.value.values[0][node][x] - 20.0).abs() < 1e-6);
            }
        }
        assert_eq!(sol.ns.stages(), 5);
    }

    #[test]
    fn myopic_discount_limit() {
        let spec = build_example1_with(10, 3.0, 7.0, Horizon::Discounted { beta: 1e-6 });
        let grid = SimplexGrid::build(2, 20, 10_000).unwrap();
        let solver = SmfeSolver::new(&spec, grid, SolverParams::default());
        let sol = solver.solve_discounted(Some(3), 1e-6).unwrap();
        // At m = (1, 0): zero requests, underload cost 5; the tail adds
        // at most beta * 5 / (1 - beta).
        let v = sol.value.value(1, &[1.0, 0.0], 0);
        assert!((v - 5.0).abs() < 1e-5, "v = {v}");
    }

    #[test]
    fn belief_shock_identity_and_terminal() {
        let spec = build_example1_with(10, 3.0, 7.0, Horizon::Finite { t: 6 });
        let grid = SimplexGrid::build(2, 50, 10_000).unwrap();
        let solver = SmfeSolver::new(&spec, grid, SolverParams::default());
        let sol = solver.solve_finite().unwrap();
        // No-shock: identical tail.
        let tail = sol
            .belief_shock(&spec, 3, &sol.ns.m_trajectory[2])
            .unwrap();
        for (a, b) in tail.m_trajectory.iter().zip(&sol.ns.m_trajectory[2..]) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        for (a, b) in tail.laws.iter().zip(&sol.ns.laws[2..]) {
            assert_eq!(a.rows(), b.rows());
        }
        // Shock at the last stage changes only the last law.
        let tail_t = sol.belief_shock(&spec, 6, &[1.0, 0.0]).unwrap();
        assert_eq!(tail_t.laws.len(), 1);
        let spliced = sol.ns.spliced(&tail_t);
        assert_eq!(spliced.stages(), 6);
        for t in 0..5 {
            assert_eq!(spliced.laws[t].rows(), sol.ns.laws[t].rows());
        }
    }

    #[test]
    fn truncation_horizon_tail_bound() {
        let t = truncation_stages(0.9, 5.0, 1e-6);
        let tail = 0.9f64.powi(t as i32) * 5.0 / 0.1;
        assert!(tail <= 1e-6);
        let shorter = 0.9f64.powi(t as i32 - 1) * 5.0 / 0.1;
        assert!(shorter > 1e-6);
    }
}
