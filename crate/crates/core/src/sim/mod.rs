//! Monte Carlo simulation of the n-player system.
//!
//! A replication draws initial states i.i.d. from the spec's initial
//! distribution, then per stage: every player samples an action from its
//! strategy row, stage costs are charged at the realized joint
//! state-action empirical distribution, and states move under the kernel
//! at the realized deep state. All randomness is counter-based (one
//! stream per `(seed, replication, player, stage, kind)`), so runs replay
//! bit-exactly and permutation experiments are exact rather than
//! statistical.

mod stream;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dss::{expected_population_value, DssSolver, EquilibriumStrategy, SolverParams};
use crate::dynamics::DeepState;
use crate::error::{Error, Result};
use crate::model::{GameSpec, Horizon, Stage};
use crate::smfe::{NsStrategy, SimplexGrid, SmfeSolution, SmfeSolver};
use stream::{draw_uniform, sample_categorical, DrawKind};

/// Per-player strategy lookup used by the simulator.
///
/// The bundled implementations ignore `player`, which is what makes them
/// index-invariant; test doubles may depend on it to plant violations.
pub trait PopulationStrategy: Sync {
    fn action_row(&self, player: usize, t: Stage, x: usize, d: &DeepState) -> Result<&[f64]>;
}

impl PopulationStrategy for EquilibriumStrategy {
    fn action_row(&self, _player: usize, t: Stage, x: usize, d: &DeepState) -> Result<&[f64]> {
        Ok(self.law(t, d)?.row(x))
    }
}

impl PopulationStrategy for NsStrategy {
    fn action_row(&self, _player: usize, t: Stage, x: usize, _d: &DeepState) -> Result<&[f64]> {
        Ok(self.law(t)?.row(x))
    }
}

/// Simulation controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOptions {
    pub horizon: usize,
    pub replications: usize,
    pub seed: u64,
    /// Record per-replication deep-state paths.
    pub record_paths: bool,
    /// Record per-player realized costs.
    pub record_player_costs: bool,
    /// Fixed initial counts instead of i.i.d. draws (canonical player
    /// assignment: lowest-indexed players take the lowest states).
    pub initial_counts: Option<Vec<u32>>,
    /// Stream relabeling `player -> stream` for exact permutation runs.
    pub stream_permutation: Option<Vec<u32>>,
}

impl SimOptions {
    pub fn new(horizon: usize, replications: usize, seed: u64) -> Self {
        Self {
            horizon,
            replications,
            seed,
            record_paths: true,
            record_player_costs: true,
            initial_counts: None,
            stream_permutation: None,
        }
    }

    /// Drops per-replication recording; keeps only the aggregates.
    pub fn light(mut self) -> Self {
        self.record_paths = false;
        self.record_player_costs = false;
        self
    }
}

/// Aggregated simulation output. The generic-player mean cost is the
/// average over replications of the population-average realized cost;
/// its standard error is the sample deviation over replications divided
/// by `sqrt(replications)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationResult {
    pub replications: usize,
    pub horizon: usize,
    pub seed: u64,
    pub mean_cost: f64,
    pub std_error: f64,
    pub replication_means: Vec<f64>,
    /// `[replication][stage - 1][state]` when recorded.
    pub deep_paths: Option<Vec<Vec<Vec<u32>>>>,
    /// `[replication][player]` when recorded.
    pub player_costs: Option<Vec<Vec<f64>>>,
}

struct ReplicationOutput {
    mean_cost: f64,
    path: Option<Vec<Vec<u32>>>,
    costs: Option<Vec<f64>>,
}

/// Runs the population simulation.
pub fn simulate(
    spec: &GameSpec,
    strategy: &dyn PopulationStrategy,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    if opts.replications == 0 {
        return Err(Error::Inconsistent("need at least one replication".into()));
    }
    if let Some(counts) = &opts.initial_counts {
        if counts.iter().sum::<u32>() != spec.n as u32 || counts.len() != spec.num_states() {
            return Err(Error::Inconsistent(format!(
                "initial counts {counts:?} do not describe {} players over {} states",
                spec.n,
                spec.num_states()
            )));
        }
    }
    if let Some(pi) = &opts.stream_permutation {
        if pi.len() != spec.n {
            return Err(Error::Inconsistent("stream permutation length != n".into()));
        }
    }
    let outputs: Result<Vec<ReplicationOutput>> = (0..opts.replications)
        .into_par_iter()
        .map(|r| run_replication(spec, strategy, opts, r as u64))
        .collect();
    let outputs = outputs?;
    let replication_means: Vec<f64> = outputs.iter().map(|o| o.mean_cost).collect();
    let mean_cost = kahan_mean(&replication_means);
    let std_error = if replication_means.len() > 1 {
        let var = replication_means
            .iter()
            .map(|&v| (v - mean_cost) * (v - mean_cost))
            .sum::<f64>()
            / (replication_means.len() - 1) as f64;
        (var / replication_means.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(SimulationResult {
        replications: opts.replications,
        horizon: opts.horizon,
        seed: opts.seed,
        mean_cost,
        std_error,
        replication_means,
        deep_paths: opts
            .record_paths
            .then(|| outputs.iter().map(|o| o.path.clone().unwrap()).collect()),
        player_costs: opts
            .record_player_costs
            .then(|| outputs.iter().map(|o| o.costs.clone().unwrap()).collect()),
    })
}

fn run_replication(
    spec: &GameSpec,
    strategy: &dyn PopulationStrategy,
    opts: &SimOptions,
    replication: u64,
) -> Result<ReplicationOutput> {
    let n = spec.n;
    let nx = spec.num_states();
    let nu = spec.num_actions();
    let seed = opts.seed;
    let stream = |player: usize| -> u32 {
        opts.stream_permutation
            .as_ref()
            .map_or(player as u32, |pi| pi[player])
    };
    let mut states: Vec<usize> = match &opts.initial_counts {
        Some(counts) => counts
            .iter()
            .enumerate()
            .flat_map(|(x, &c)| std::iter::repeat(x).take(c as usize))
            .collect(),
        None => (0..n)
            .map(|i| {
                let r = draw_uniform(seed, replication, stream(i), 0, DrawKind::InitialState);
                sample_categorical(&spec.initial_dist, r)
            })
            .collect(),
    };
    let discount = spec.discount();
    let mut weight = 1.0;
    let mut costs = vec![0.0f64; n];
    let mut cost_comp = vec![0.0f64; n];
    let mut path = opts.record_paths.then(Vec::new);
    let mut actions = vec![0usize; n];
    for t in 1..=opts.horizon {
        let d = DeepState::from_states(&states, nx);
        if let Some(p) = &mut path {
            p.push(d.counts().to_vec());
        }
        for (i, &x) in states.iter().enumerate() {
            let row = strategy.action_row(i, t, x, &d)?;
            let r = draw_uniform(seed, replication, stream(i), t as u32, DrawKind::Action);
            actions[i] = sample_categorical(row, r);
        }
        // Realized joint empirical distribution of all n players.
        let mut dd = vec![vec![0.0f64; nu]; nx];
        for (&x, &u) in states.iter().zip(&actions) {
            dd[x][u] += 1.0 / n as f64;
        }
        for (i, (&x, &u)) in states.iter().zip(&actions).enumerate() {
            let c = weight * spec.cost.eval(t, x, u, &dd, n);
            // Compensated accumulation: long discounted sums stay exact
            // enough for bit-stable aggregation.
            let y = c - cost_comp[i];
            let s = costs[i] + y;
            cost_comp[i] = (s - costs[i]) - y;
            costs[i] = s;
        }
        let d_probs = d.probs();
        for i in 0..n {
            let row = spec.kernel.row(t, states[i], actions[i], &d_probs);
            let r = draw_uniform(seed, replication, stream(i), t as u32, DrawKind::Transition);
            states[i] = sample_categorical(&row, r);
        }
        weight *= discount;
    }
    let mean_cost = kahan_mean(&costs);
    Ok(ReplicationOutput {
        mean_cost,
        path,
        costs: opts.record_player_costs.then_some(costs),
    })
}

fn kahan_mean(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum / values.len() as f64
}

/// Outcome of the index-invariance check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationCheck {
    pub pass: bool,
    pub deep_paths_equal: bool,
    pub costs_permuted_equal: bool,
    pub permutation: Vec<u32>,
}

/// Simulates twice, once with player labels routed through a seeded
/// permutation. Index-invariant strategies must produce the exact same
/// deep-state paths, with per-player costs equal up to the permutation.
pub fn permutation_check(
    spec: &GameSpec,
    strategy: &dyn PopulationStrategy,
    opts: &SimOptions,
) -> Result<PermutationCheck> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut base_opts = opts.clone();
    base_opts.record_paths = true;
    base_opts.record_player_costs = true;
    base_opts.stream_permutation = None;
    base_opts.initial_counts = None;
    let base = simulate(spec, strategy, &base_opts)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e3779b97f4a7c15);
    let mut pi: Vec<u32> = (0..spec.n as u32).collect();
    pi.shuffle(&mut rng);
    let mut perm_opts = base_opts.clone();
    perm_opts.stream_permutation = Some(pi.clone());
    let permuted = simulate(spec, strategy, &perm_opts)?;
    let deep_paths_equal = base.deep_paths == permuted.deep_paths;
    let base_costs = base.player_costs.as_ref().unwrap();
    let perm_costs = permuted.player_costs.as_ref().unwrap();
    let costs_permuted_equal = base_costs
        .iter()
        .zip(perm_costs)
        .all(|(b, p)| (0..spec.n).all(|i| p[i] == b[pi[i] as usize]));
    Ok(PermutationCheck {
        pass: deep_paths_equal && costs_permuted_equal,
        deep_paths_equal,
        costs_permuted_equal,
        permutation: pi,
    })
}

/// Paired trembling-hand run: all players adopt a common shocked belief at
/// `t_shock`, tail laws re-read from the state-feedback map; the baseline
/// uses the unshocked flow under the same seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TremblingReport {
    pub baseline: SimulationResult,
    pub shocked: SimulationResult,
    pub mean_cost_delta: f64,
}

pub fn trembling_hand_experiment(
    spec: &GameSpec,
    solution: &SmfeSolution,
    t_shock: Stage,
    m_shock: &[f64],
    opts: &SimOptions,
) -> Result<TremblingReport> {
    if opts.horizon > solution.ns.stages() {
        return Err(Error::Inconsistent(format!(
            "horizon {} exceeds the strategy's {} stages",
            opts.horizon,
            solution.ns.stages()
        )));
    }
    let tail = solution.belief_shock(spec, t_shock, m_shock)?;
    let shocked_ns = solution.ns.spliced(&tail);
    let baseline = simulate(spec, &solution.ns, opts)?;
    let shocked = simulate(spec, &shocked_ns, opts)?;
    let mean_cost_delta = shocked.mean_cost - baseline.mean_cost;
    Ok(TremblingReport {
        baseline,
        shocked,
        mean_cost_delta,
    })
}

/// One row of the convergence experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    /// Exact equilibrium value of the generic player (no Monte Carlo).
    pub j_star: f64,
    /// Simulated cost of the no-sharing strategy on the n-player system.
    pub j_hat: f64,
    pub std_error: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log gap` against `log n`.
    pub fitted_slope: f64,
}

/// Measures `|J_hat(n) - J*(n)|` for each population size: `J*` from the
/// exact deep-state solve, `J_hat` by simulating the no-sharing strategy
/// on the finite system.
pub fn convergence_experiment(
    build: &(dyn Fn(usize) -> GameSpec + Sync),
    n_list: &[usize],
    grid_resolution: u32,
    replications: usize,
    seed: u64,
    params: SolverParams,
) -> Result<ConvergenceTable> {
    let mut rows = Vec::with_capacity(n_list.len());
    for (i, &n) in n_list.iter().enumerate() {
        let spec = build(n);
        let t_max = spec.horizon.stages().ok_or_else(|| {
            Error::Inconsistent("convergence experiment needs finite horizons".into())
        })?;
        let dss = DssSolver::new(&spec, params)?.solve_finite()?;
        let j_star = expected_population_value(&spec, &dss.values);
        let grid = SimplexGrid::build(spec.num_states(), grid_resolution, params.support_cap)?;
        let smfe = SmfeSolver::new(&spec, grid, params).solve_finite()?;
        let opts = SimOptions::new(t_max, replications, seed.wrapping_add(i as u64)).light();
        let sim = simulate(&spec, &smfe.ns, &opts)?;
        rows.push(ConvergenceRow {
            n,
            j_star,
            j_hat: sim.mean_cost,
            std_error: sim.std_error,
            gap: (sim.mean_cost - j_star).abs(),
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.gap > 0.0)
        .map(|r| ((r.n as f64).ln(), r.gap.ln()))
        .collect();
    Ok(ConvergenceTable {
        fitted_slope: least_squares_slope(&pts),
        rows,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Samples `samples` one-step transitions of the other players from a
/// fixed `(x, d^{-i}, law)` configuration and histograms the next
/// others-deep-state. Used to cross-validate the exact kernel.
pub fn sample_one_step_others(
    spec: &GameSpec,
    t: Stage,
    deviator_x: usize,
    others: &crate::dynamics::OthersDeepState,
    law: &crate::model::LocalLaw,
    samples: usize,
    seed: u64,
) -> Vec<(Vec<u32>, u64)> {
    use rand::Rng;
    use rand::SeedableRng;
    let nx = spec.num_states();
    let d_full = crate::dynamics::blend(others, deviator_x);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut hist = std::collections::HashMap::<Vec<u32>, u64>::new();
    for _ in 0..samples {
        let mut next = vec![0u32; nx];
        for (x, &k) in others.counts().iter().enumerate() {
            if k == 0 {
                continue;
            }
            let row = law.row(x);
            for _ in 0..k {
                let u = sample_categorical(row, rng.random());
                let p = spec.kernel.row(t, x, u, &d_full);
                next[sample_categorical(&p, rng.random())] += 1;
            }
        }
        *hist.entry(next).or_insert(0) += 1;
    }
    let mut out: Vec<(Vec<u32>, u64)> = hist.into_iter().collect();
    out.sort_unstable();
    out
}

/// Finite horizon of a spec, or a structured error.
pub fn finite_horizon_of(spec: &GameSpec) -> Result<usize> {
    match spec.horizon {
        Horizon::Finite { t } => Ok(t),
        Horizon::Discounted { .. } => Err(Error::Inconsistent(
            "operation needs a finite-horizon spec".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_example1_with, ActionSpace, CostSpec, LocalLaw, StateCost, StateSpace,
        TransitionKernel,
    };

    fn deterministic_spec() -> GameSpec {
        GameSpec {
            states: StateSpace::numbered(2),
            actions: ActionSpace::numbered(2),
            n: 4,
            horizon: Horizon::Finite { t: 3 },
            kernel: TransitionKernel::tabular(vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ]),
            cost: CostSpec::d_only(StateCost::Affine {
                base: vec![vec![vec![1.0, 2.0], vec![0.5, 0.25]]],
                slope: vec![vec![
                    vec![vec![0.0, 1.0], vec![0.0, 0.0]],
                    vec![vec![0.0, 0.0], vec![0.0, 2.0]],
                ]],
            }),
            initial_dist: vec![1.0, 0.0],
        }
    }

    struct FixedLaw(LocalLaw);

    impl PopulationStrategy for FixedLaw {
        fn action_row(&self, _p: usize, _t: Stage, x: usize, _d: &DeepState) -> Result<&[f64]> {
            Ok(self.0.row(x))
        }
    }

    #[test]
    fn deterministic_setup_has_zero_variance() {
        let spec = deterministic_spec();
        let strategy = FixedLaw(LocalLaw::pure(&[1, 0], 2));
        let opts = SimOptions::new(3, 8, 42);
        let result = simulate(&spec, &strategy, &opts).unwrap();
        assert_eq!(result.std_error, 0.0);
        let paths = result.deep_paths.unwrap();
        for p in &paths {
            assert_eq!(p, &paths[0]);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let spec = build_example1_with(6, 2.0, 4.0, Horizon::Finite { t: 5 });
        let strategy = FixedLaw(LocalLaw::uniform(2, 3));
        let opts = SimOptions::new(5, 10, 7);
        let a = simulate(&spec, &strategy, &opts).unwrap();
        let b = simulate(&spec, &strategy, &opts).unwrap();
        assert_eq!(a.mean_cost, b.mean_cost);
        assert_eq!(a.deep_paths, b.deep_paths);
        assert_eq!(a.player_costs, b.player_costs);
    }

    #[test]
    fn derived_deep_state_matches_recount() {
        let spec = build_example1_with(6, 2.0, 4.0, Horizon::Finite { t: 4 });
        let strategy = FixedLaw(LocalLaw::uniform(2, 3));
        let opts = SimOptions::new(4, 5, 11);
        let result = simulate(&spec, &strategy, &opts).unwrap();
        for path in result.deep_paths.unwrap() {
            for counts in path {
                assert_eq!(counts.iter().sum::<u32>(), 6);
            }
        }
    }

    #[test]
    fn fixed_initial_counts_override_draws() {
        let spec = build_example1_with(6, 2.0, 4.0, Horizon::Finite { t: 2 });
        let strategy = FixedLaw(LocalLaw::uniform(2, 3));
        let mut opts = SimOptions::new(2, 3, 5);
        opts.initial_counts = Some(vec![2, 4]);
        let result = simulate(&spec, &strategy, &opts).unwrap();
        for path in result.deep_paths.unwrap() {
            assert_eq!(path[0], vec![2, 4]);
        }
    }

    #[test]
    fn permutation_check_passes_for_index_invariant_laws() {
        let spec = build_example1_with(10, 3.0, 7.0, Horizon::Finite { t: 6 });
        let strategy = FixedLaw(LocalLaw::uniform(2, 3));
        let opts = SimOptions::new(6, 4, 13);
        let check = permutation_check(&spec, &strategy, &opts).unwrap();
        assert!(check.pass, "{check:?}");
    }

    #[test]
    fn permutation_check_fails_for_planted_index_dependence() {
        struct Biased(LocalLaw);
        impl PopulationStrategy for Biased {
            fn action_row(&self, p: usize, _t: Stage, x: usize, _d: &DeepState) -> Result<&[f64]> {
                if p == 0 {
                    Ok(&[0.0, 0.0, 1.0])
                } else {
                    Ok(self.0.row(x))
                }
            }
        }
        let spec = build_example1_with(10, 3.0, 7.0, Horizon::Finite { t: 6 });
        let strategy = Biased(LocalLaw::pure(&[0, 0], 3));
        let opts = SimOptions::new(6, 4, 13);
        let check = permutation_check(&spec, &strategy, &opts).unwrap();
        assert!(!check.pass);
    }

    #[test]
    fn slope_fit_recovers_exact_powers() {
        let pts: Vec<(f64, f64)> = [4.0f64, 8.0, 16.0, 32.0]
            .iter()
            .map(|&n| (n.ln(), (3.0 * n.powf(-0.5)).ln()))
            .collect();
        assert!((least_squares_slope(&pts) + 0.5).abs() < 1e-12);
    }
}
