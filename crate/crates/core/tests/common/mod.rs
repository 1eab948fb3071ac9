//! Shared test support: seeded model generators and brute-force oracles.
//!
//! The oracles enumerate every other player's action draw and transition
//! individually, multiplying probabilities along each branch and binning
//! the outcomes. They never call the convolution kernels or the solvers
//! they are used to check.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use popgame::dynamics::DeepState;
use popgame::model::{
    ActionSpace, CostSpec, GameSpec, Horizon, LocalLaw, Stage, StateCost, StateSpace,
    TransitionKernel,
};

/// Kind of population coupling for generated models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Tabular kernel, tabular cost.
    Decoupled,
    /// Affine-in-d kernel, affine d-only cost.
    Affine,
    /// Affine kernel plus a nonlinear general-in-D cost.
    GeneralCost,
}

fn dirichlet(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dims)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let s: f64 = v.iter().sum();
    for p in &mut v {
        *p /= s;
    }
    v
}

/// Seeded random game. Kernel rows are kept away from the simplex boundary
/// so affine couplings stay valid for every `d`.
pub fn random_spec(
    seed: u64,
    n: usize,
    nx: usize,
    nu: usize,
    horizon: Horizon,
    coupling: Coupling,
) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = vec![vec![vec![0.0; nx]; nu]; nx];
    for x in 0..nx {
        for u in 0..nu {
            let row = dirichlet(&mut rng, nx);
            for y in 0..nx {
                // Mix toward uniform: entries in [0.3/nx, ...].
                base[x][u][y] = 0.3 / nx as f64 + 0.7 * row[y];
            }
        }
    }
    let kernel = match coupling {
        Coupling::Decoupled => TransitionKernel::tabular(base),
        Coupling::Affine | Coupling::GeneralCost => {
            // Column-centered slopes bounded by half the smallest base
            // entry: rows stay probability vectors for every d.
            let min_base = base
                .iter()
                .flatten()
                .flatten()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let mut slope = vec![vec![vec![vec![0.0; nx]; nx]; nu]; nx];
            for x in 0..nx {
                for u in 0..nu {
                    for z in 0..nx {
                        let raw: Vec<f64> = (0..nx).map(|_| rng.random::<f64>() - 0.5).collect();
                        let mean = raw.iter().sum::<f64>() / nx as f64;
                        let max_abs = raw
                            .iter()
                            .map(|v| (v - mean).abs())
                            .fold(0.0f64, f64::max)
                            .max(1e-9);
                        for y in 0..nx {
                            slope[x][u][y][z] = (raw[y] - mean) / max_abs * (min_base * 0.45);
                        }
                    }
                }
            }
            TransitionKernel::affine(base, slope)
        }
    };
    let mut cost_base = vec![vec![vec![0.0; nu]; nx]];
    for x in 0..nx {
        for u in 0..nu {
            cost_base[0][x][u] = rng.random::<f64>();
        }
    }
    let cost = match coupling {
        Coupling::Decoupled => CostSpec::d_only(StateCost::Tabular { values: cost_base }),
        Coupling::Affine => {
            let mut slope = vec![vec![vec![vec![0.0; nx]; nu]; nx]];
            for x in 0..nx {
                for u in 0..nu {
                    for z in 0..nx {
                        slope[0][x][u][z] = rng.random::<f64>() * 0.8;
                    }
                }
            }
            CostSpec::d_only(StateCost::Affine {
                base: cost_base,
                slope,
            })
        }
        Coupling::GeneralCost => {
            let weights: Vec<Vec<f64>> = (0..nx)
                .map(|_| (0..nu).map(|_| rng.random::<f64>()).collect())
                .collect();
            let base = cost_base.remove(0);
            let w = Arc::new(weights);
            let b = Arc::new(base);
            CostSpec::general(
                &format!("test_quadratic_{seed}"),
                Arc::new(move |_t, x, u, dd: &[Vec<f64>], _n| {
                    let mut c = b[x][u];
                    for (xp, row) in dd.iter().enumerate() {
                        for (up, &mass) in row.iter().enumerate() {
                            c += w[xp][up] * mass * mass;
                        }
                    }
                    c
                }),
            )
        }
    };
    let initial_dist = dirichlet(&mut rng, nx);
    GameSpec {
        states: StateSpace::numbered(nx),
        actions: ActionSpace::numbered(nu),
        n,
        horizon,
        kernel,
        cost,
        initial_dist,
    }
    .checked()
    .expect("generated spec is valid")
}

/// Seeded random law.
pub fn random_law(seed: u64, nx: usize, nu: usize) -> LocalLaw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LocalLaw::new((0..nx).map(|_| dirichlet(&mut rng, nu)).collect()).unwrap()
}

/// Expands others-counts into an explicit player-state list.
pub fn expand_counts(counts: &[u32]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(x, &c)| std::iter::repeat(x).take(c as usize))
        .collect()
}

fn blend_of(others_counts: &[u32], deviator_x: usize) -> Vec<f64> {
    let n = others_counts.iter().sum::<u32>() as f64 + 1.0;
    others_counts
        .iter()
        .enumerate()
        .map(|(y, &c)| (c as f64 + f64::from(y == deviator_x)) / n)
        .collect()
}

/// Brute-force law of the next others-deep-state: enumerates every other
/// player's action and next state.
pub fn brute_next_deep_pmf(
    spec: &GameSpec,
    t: Stage,
    deviator_x: usize,
    others_counts: &[u32],
    law: &LocalLaw,
) -> HashMap<Vec<u32>, f64> {
    let players = expand_counts(others_counts);
    let d_full = blend_of(others_counts, deviator_x);
    let nx = spec.num_states();
    let nu = spec.num_actions();
    let mut acc: HashMap<Vec<u32>, f64> = HashMap::new();
    fn rec(
        spec: &GameSpec,
        t: Stage,
        players: &[usize],
        idx: usize,
        weight: f64,
        counts: &mut Vec<u32>,
        law: &LocalLaw,
        d_full: &[f64],
        nu: usize,
        acc: &mut HashMap<Vec<u32>, f64>,
    ) {
        if weight == 0.0 {
            return;
        }
        if idx == players.len() {
            *acc.entry(counts.clone()).or_insert(0.0) += weight;
            return;
        }
        let x = players[idx];
        for u in 0..nu {
            let pu = law.row(x)[u];
            if pu == 0.0 {
                continue;
            }
            for y in 0..counts.len() {
                let py = spec.kernel.eval(t, y, x, u, d_full);
                if py == 0.0 {
                    continue;
                }
                counts[y] += 1;
                rec(spec, t, players, idx + 1, weight * pu * py, counts, law, d_full, nu, acc);
                counts[y] -= 1;
            }
        }
    }
    let mut counts = vec![0u32; nx];
    rec(
        spec,
        t,
        &players,
        0,
        1.0,
        &mut counts,
        law,
        &d_full,
        nu,
        &mut acc,
    );
    acc
}

/// Brute-force law of the others' joint state-action empirical counts.
pub fn brute_action_split_pmf(
    others_counts: &[u32],
    law: &LocalLaw,
) -> HashMap<Vec<Vec<u32>>, f64> {
    let players = expand_counts(others_counts);
    let nx = others_counts.len();
    let nu = law.num_actions();
    let mut acc: HashMap<Vec<Vec<u32>>, f64> = HashMap::new();
    fn rec(
        players: &[usize],
        idx: usize,
        weight: f64,
        counts: &mut Vec<Vec<u32>>,
        law: &LocalLaw,
        nu: usize,
        acc: &mut HashMap<Vec<Vec<u32>>, f64>,
    ) {
        if idx == players.len() {
            *acc.entry(counts.clone()).or_insert(0.0) += weight;
            return;
        }
        let x = players[idx];
        for u in 0..nu {
            let pu = law.row(x)[u];
            if pu == 0.0 {
                continue;
            }
            counts[x][u] += 1;
            rec(players, idx + 1, weight * pu, counts, law, nu, acc);
            counts[x][u] -= 1;
        }
    }
    let mut counts = vec![vec![0u32; nu]; nx];
    rec(&players, 0, 1.0, &mut counts, law, nu, &mut acc);
    acc
}

/// Brute-force expected stage cost of a deviator playing `own_row` at `x`
/// in full deep state `d_counts`.
pub fn brute_expected_stage_cost(
    spec: &GameSpec,
    t: Stage,
    x: usize,
    d_counts: &[u32],
    own_row: &[f64],
    others_law: &LocalLaw,
) -> f64 {
    let mut others = d_counts.to_vec();
    assert!(others[x] > 0);
    others[x] -= 1;
    let n = spec.n as f64;
    let splits = brute_action_split_pmf(&others, others_law);
    let mut total = 0.0;
    for (split, p) in &splits {
        for (u, &w) in own_row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut dd: Vec<Vec<f64>> = split
                .iter()
                .map(|row| row.iter().map(|&c| c as f64 / n).collect())
                .collect();
            dd[x][u] += 1.0 / n;
            total += p * w * spec.cost.eval(t, x, u, &dd, spec.n);
        }
    }
    total
}

/// A pure Markov deviator policy: `(t, x, d_counts) -> action`.
pub type DeviatorPolicy<'a> = &'a dyn Fn(Stage, usize, &[u32]) -> usize;

/// Exact expected total cost of a deviator following `policy` from
/// `(t, x, others)` against a frozen population strategy, by full tree
/// enumeration including every other player's action and transition.
#[allow(clippy::too_many_arguments)]
pub fn brute_deviator_cost(
    spec: &GameSpec,
    laws: &dyn Fn(Stage, &[u32]) -> LocalLaw,
    policy: DeviatorPolicy,
    t: Stage,
    t_max: Stage,
    x: usize,
    others_counts: &[u32],
    discount: f64,
) -> f64 {
    if t > t_max {
        return 0.0;
    }
    let nx = spec.num_states();
    let nu = spec.num_actions();
    let mut d_counts = others_counts.to_vec();
    d_counts[x] += 1;
    let law = laws(t, &d_counts);
    let u_dev = policy(t, x, &d_counts);
    let d_full = blend_of(others_counts, x);
    let players = expand_counts(others_counts);
    let n = spec.n as f64;

    // Enumerate others' actions jointly; per action profile charge the
    // deviator's stage cost, then enumerate all transitions.
    let mut total = 0.0;
    let mut action_profile = vec![0usize; players.len()];
    loop {
        let mut weight = 1.0;
        for (j, &xj) in players.iter().enumerate() {
            weight *= law.row(xj)[action_profile[j]];
        }
        if weight > 0.0 {
            let mut dd = vec![vec![0.0; nu]; nx];
            for (j, &xj) in players.iter().enumerate() {
                dd[xj][action_profile[j]] += 1.0 / n;
            }
            dd[x][u_dev] += 1.0 / n;
            let stage_cost = spec.cost.eval(t, x, u_dev, &dd, spec.n);
            // Transitions: recursively enumerate others' next states and
            // the deviator's own.
            let mut cont = 0.0;
            let mut next_counts = vec![0u32; nx];
            enumerate_transitions(
                spec,
                t,
                &players,
                &action_profile,
                0,
                1.0,
                &mut next_counts,
                &d_full,
                &mut |others_next, w_others| {
                    for y in 0..nx {
                        let py = spec.kernel.eval(t, y, x, u_dev, &d_full);
                        if py == 0.0 {
                            continue;
                        }
                        cont += w_others
                            * py
                            * brute_deviator_cost(
                                spec,
                                laws,
                                policy,
                                t + 1,
                                t_max,
                                y,
                                others_next,
                                discount,
                            );
                    }
                },
            );
            total += weight * (stage_cost + discount * cont);
        }
        // Next action profile (odometer).
        let mut pos = 0;
        loop {
            if pos == action_profile.len() {
                return total;
            }
            action_profile[pos] += 1;
            if action_profile[pos] < nu {
                break;
            }
            action_profile[pos] = 0;
            pos += 1;
        }
    }
}

fn enumerate_transitions(
    spec: &GameSpec,
    t: Stage,
    players: &[usize],
    actions: &[usize],
    idx: usize,
    weight: f64,
    counts: &mut Vec<u32>,
    d_full: &[f64],
    visit: &mut dyn FnMut(&[u32], f64),
) {
    if idx == players.len() {
        visit(counts, weight);
        return;
    }
    let x = players[idx];
    let u = actions[idx];
    for y in 0..counts.len() {
        let py = spec.kernel.eval(t, y, x, u, d_full);
        if py == 0.0 {
            continue;
        }
        counts[y] += 1;
        enumerate_transitions(spec, t, players, actions, idx + 1, weight * py, counts, d_full, visit);
        counts[y] -= 1;
    }
}

/// All pure Markov deviator policies on the reachable `(t, x, d)` node set
/// of a small finite game, as index vectors over an enumerated node list.
pub struct PolicySpace {
    /// (t, x, d_counts) nodes, deterministic order.
    pub nodes: Vec<(Stage, usize, Vec<u32>)>,
    pub num_actions: usize,
}

impl PolicySpace {
    pub fn enumerate(spec: &GameSpec, t_max: Stage) -> Self {
        let nx = spec.num_states();
        let lattice =
            popgame::dynamics::CountSimplex::enumerate(spec.n as u32, nx, 1_000_000).unwrap();
        let mut nodes = Vec::new();
        for t in 1..=t_max {
            for i in 0..lattice.len() {
                let d = lattice.node(i);
                for x in 0..nx {
                    if d[x] > 0 {
                        nodes.push((t, x, d.to_vec()));
                    }
                }
            }
        }
        Self {
            nodes,
            num_actions: spec.num_actions(),
        }
    }

    pub fn num_policies(&self) -> usize {
        self.num_actions.pow(self.nodes.len() as u32)
    }

    /// Decodes policy `index` into a lookup closure.
    pub fn policy(&self, index: usize) -> impl Fn(Stage, usize, &[u32]) -> usize + '_ {
        move |t, x, d| {
            let pos = self
                .nodes
                .iter()
                .position(|(nt, nx_, nd)| *nt == t && *nx_ == x && nd == d)
                .expect("node known");
            (index / self.num_actions.pow(pos as u32)) % self.num_actions
        }
    }
}

/// Single-agent finite-horizon DP for fully decoupled models with
/// population-independent tabular costs: the oracle for the degenerate
/// case where the population does not matter.
pub fn single_agent_dp(spec: &GameSpec, t_max: Stage) -> Vec<Vec<f64>> {
    let nx = spec.num_states();
    let nu = spec.num_actions();
    let uniform = vec![1.0 / nx as f64; nx];
    let dd_for = |_x: usize, _u: usize| -> Vec<Vec<f64>> {
        vec![vec![1.0 / (nx * nu) as f64; nu]; nx]
    };
    let mut next = vec![0.0; nx];
    let mut out = vec![vec![0.0; nx]; t_max];
    for t in (1..=t_max).rev() {
        let mut cur = vec![0.0; nx];
        for x in 0..nx {
            let mut best = f64::INFINITY;
            for u in 0..nu {
                let c = spec.cost.eval(t, x, u, &dd_for(x, u), spec.n);
                let mut v = c;
                for y in 0..nx {
                    v += spec.kernel.eval(t, y, x, u, &uniform) * next[y];
                }
                best = best.min(v);
            }
            cur[x] = best;
        }
        out[t - 1] = cur.clone();
        next = cur;
    }
    out
}

/// Exact expected population-average cost of a strategy on a tiny game by
/// full enumeration over initial states, actions and transitions.
pub fn brute_population_cost(
    spec: &GameSpec,
    strategy: &dyn popgame::sim::PopulationStrategy,
    t_max: Stage,
) -> f64 {
    let nx = spec.num_states();
    let n = spec.n;
    let mut total = 0.0;
    let mut states = vec![0usize; n];
    // Enumerate initial state vectors.
    loop {
        let mut w = 1.0;
        for &x in &states {
            w *= spec.initial_dist[x];
        }
        if w > 0.0 {
            total += w * stage_cost_recursive(spec, strategy, 1, t_max, &states);
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return total;
            }
            states[pos] += 1;
            if states[pos] < nx {
                break;
            }
            states[pos] = 0;
            pos += 1;
        }
    }
}

fn stage_cost_recursive(
    spec: &GameSpec,
    strategy: &dyn popgame::sim::PopulationStrategy,
    t: Stage,
    t_max: Stage,
    states: &[usize],
) -> f64 {
    if t > t_max {
        return 0.0;
    }
    let nx = spec.num_states();
    let nu = spec.num_actions();
    let n = spec.n;
    let d = DeepState::from_states(states, nx);
    let d_probs = d.probs();
    let mut total = 0.0;
    let mut actions = vec![0usize; n];
    loop {
        let mut w = 1.0;
        for (i, &x) in states.iter().enumerate() {
            w *= strategy.action_row(i, t, x, &d).unwrap()[actions[i]];
        }
        if w > 0.0 {
            let mut dd = vec![vec![0.0; nu]; nx];
            for (&x, &u) in states.iter().zip(&actions) {
                dd[x][u] += 1.0 / n as f64;
            }
            // Population-average stage cost.
            let mut stage = 0.0;
            for (&x, &u) in states.iter().zip(&actions) {
                stage += spec.cost.eval(t, x, u, &dd, n) / n as f64;
            }
            // Transitions.
            let mut cont = 0.0;
            let mut next_states = vec![0usize; n];
            enumerate_state_vectors(spec, t, states, &actions, &d_probs, 0, 1.0, &mut next_states, &mut |ns, wn| {
                cont += wn * stage_cost_recursive(spec, strategy, t + 1, t_max, ns);
            });
            total += w * (stage + spec.discount() * cont);
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return total;
            }
            actions[pos] += 1;
            if actions[pos] < nu {
                break;
            }
            actions[pos] = 0;
            pos += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn enumerate_state_vectors(
    spec: &GameSpec,
    t: Stage,
    states: &[usize],
    actions: &[usize],
    d_probs: &[f64],
    idx: usize,
    weight: f64,
    next: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize], f64),
) {
    if idx == states.len() {
        visit(next, weight);
        return;
    }
    for y in 0..spec.num_states() {
        let py = spec.kernel.eval(t, y, states[idx], actions[idx], d_probs);
        if py == 0.0 {
            continue;
        }
        next[idx] = y;
        enumerate_state_vectors(spec, t, states, actions, d_probs, idx + 1, weight * py, next, visit);
    }
}
