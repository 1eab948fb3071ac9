//! Bundled models: the shared-resource request game (`example1`) and a
//! coupled binary test model used by convergence experiments.

use crate::model::{
    ActionSpace, CostSpec, GameSpec, Horizon, StateCost, StateSpace, TransitionKernel,
};

/// Shared-resource request game with the reference parameters:
/// `n = 100`, request/serve probabilities `p = q = 0.3`, committed
/// decrease/increase variants `(p_D, q_D, p_I) = (0.2, 0.4, 0.4)`,
/// discount `beta = 0.9`, and a band cost charging 5 when the total request
/// count is below 30 and 1 when it reaches 70.
pub fn build_example1() -> GameSpec {
    build_example1_with(100, 30.0, 70.0, Horizon::Discounted { beta: 0.9 })
}

/// The same game with a custom population size, band thresholds and horizon.
/// Useful for scaled-down instances (e.g. `n = 10` with thresholds `3`/`7`).
pub fn build_example1_with(n: usize, alpha: f64, gamma: f64, horizon: Horizon) -> GameSpec {
    let (p, q, p_d, q_d, p_i) = (0.3, 0.3, 0.2, 0.4, 0.4);
    // probs[x][u][y]; state 1 = holding a request.
    let probs = vec![
        vec![
            vec![1.0 - p, p],     // baseline request
            vec![1.0 - p_d, p_d], // committed decrease
            vec![1.0 - p_i, p_i], // committed increase
        ],
        vec![
            vec![q, 1.0 - q],
            vec![q_d, 1.0 - q_d],
            vec![q, 1.0 - q],
        ],
    ];
    GameSpec {
        states: StateSpace::new(vec!["idle", "request"]).unwrap(),
        actions: ActionSpace::new(vec!["baseline", "decrease", "increase"]).unwrap(),
        n,
        horizon,
        kernel: TransitionKernel::tabular(probs),
        cost: CostSpec::d_only(StateCost::RequestBand {
            underload: 5.0,
            overload: 1.0,
            alpha,
            gamma,
        }),
        initial_dist: vec![0.5, 0.5],
    }
}

/// Binary-state model with both dynamics and cost coupled to the population,
/// used to measure how the no-sharing strategy approaches the deep
/// equilibrium as `n` grows.
///
/// Dynamics: `P(1 | x, u, d) = p0[x][u] + 0.3 d(1)`. Cost: an action-priced
/// congestion term `c(x, u, d) = price[x][u] + w[x][u] d(1)`.
pub fn build_convergence_demo(n: usize, horizon: Horizon) -> GameSpec {
    let p0: [[f64; 2]; 2] = [[0.2, 0.5], [0.1, 0.6]];
    let price: [[f64; 2]; 2] = [[0.3, 0.55], [0.8, 0.1]];
    let weight: [[f64; 2]; 2] = [[1.4, 0.2], [1.0, -0.6]];
    let mut base = vec![vec![vec![0.0; 2]; 2]; 2];
    let mut slope = vec![vec![vec![vec![0.0; 2]; 2]; 2]; 2];
    for x in 0..2 {
        for u in 0..2 {
            base[x][u][1] = p0[x][u];
            base[x][u][0] = 1.0 - p0[x][u];
            slope[x][u][1][1] = 0.3;
            slope[x][u][0][1] = -0.3;
        }
    }
    let mut cost_base = vec![vec![vec![0.0; 2]; 2]];
    let mut cost_slope = vec![vec![vec![vec![0.0; 2]; 2]; 2]];
    for x in 0..2 {
        for u in 0..2 {
            // Keep the affine cost nonnegative over d(1) in [0,1].
            cost_base[0][x][u] = price[x][u] + weight[x][u].min(0.0).abs();
            cost_slope[0][x][u][1] = weight[x][u];
        }
    }
    GameSpec {
        states: StateSpace::new(vec!["low", "high"]).unwrap(),
        actions: ActionSpace::new(vec!["hold", "push"]).unwrap(),
        n,
        horizon,
        kernel: TransitionKernel::affine(base, slope),
        cost: CostSpec::d_only(StateCost::Affine {
            base: cost_base,
            slope: cost_slope,
        }),
        initial_dist: vec![0.6, 0.4],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate;

    #[test]
    fn example1_passes_validation() {
        assert!(validate(&build_example1()).passed());
    }

    #[test]
    fn example1_transition_matrices_exact() {
        let spec = build_example1();
        let d = vec![0.5, 0.5];
        // baseline action from idle
        assert_eq!(spec.kernel.row(1, 0, 0, &d), vec![0.7, 0.3]);
        // committed decrease from request
        assert_eq!(spec.kernel.row(1, 1, 1, &d), vec![0.4, 0.6]);
        // committed increase from idle
        assert_eq!(spec.kernel.row(1, 0, 2, &d), vec![0.6, 0.4]);
        // baseline from request
        assert_eq!(spec.kernel.row(1, 1, 0, &d), vec![0.3, 0.7]);
        // increase keeps the serve probability q
        assert_eq!(spec.kernel.row(1, 1, 2, &d), vec![0.3, 0.7]);
    }

    #[test]
    fn example1_cost_band() {
        let spec = build_example1();
        // 50 requests among others, own state idle: inside the band.
        let d = vec![0.5, 0.5];
        assert_eq!(spec.cost.eval_marginal(1, 0, 0, &d, 100), 0.0);
        // 20 requests among others, own idle: total 20 < 30.
        let d = vec![0.8, 0.2];
        assert_eq!(spec.cost.eval_marginal(1, 0, 0, &d, 100), 5.0);
        // 70 requests total: overload.
        let d = vec![0.3, 0.7];
        assert_eq!(spec.cost.eval_marginal(1, 1, 0, &d, 100), 1.0);
    }

    #[test]
    fn convergence_demo_passes_validation() {
        let spec = build_convergence_demo(8, Horizon::Finite { t: 4 });
        let report = validate(&spec);
        assert!(report.passed(), "{report}");
    }
}
