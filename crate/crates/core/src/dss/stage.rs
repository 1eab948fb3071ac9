//! Per-node equilibrium fixed point.
//!
//! At one `(stage, deep state)` node the population plays a common local
//! law; a candidate law is an equilibrium when, at every occupied state,
//! its own row is a best response against the population playing the same
//! law. The objective of the own row is linear in the row, so pure actions
//! suffice for best responses and the stage exploitability
//! `eps(law) = max_x [ <law(x), a(x,.)> - min_u a(x,u) ]`
//! is a direct optimality certificate.
//!
//! The solver is a damped best-response iteration with running average of
//! iterates (weight `1/(k+1)`), uniform initialization and a hard
//! iteration cap. Two accelerations preserve its deterministic behavior:
//! stable pure best responses are tested directly as candidates (exact for
//! games with pure equilibria), and on a geometric schedule the current
//! mixing support is polished by a damped Newton solve of the indifference
//! system, which reaches machine-precision mixed equilibria the plain
//! average only approaches at rate 1/k. Non-convergence is reported, never
//! silently accepted: the lowest-residual iterate is returned.

use crate::error::Result;
use crate::model::LocalLaw;

/// Stage-game evaluator: action values for every active state given the
/// law played by the rest of the population.
pub(crate) trait StageObjective: Sync {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// States participating in the fixed point, ascending.
    fn active_states(&self) -> &[usize];
    /// `a[i][u]` for the i-th active state: expected stage cost plus
    /// discounted continuation of playing `u` against `population_law`.
    /// `reusable` hints that the law is likely to be evaluated again.
    fn action_values(&self, population_law: &LocalLaw, reusable: bool) -> Result<Vec<Vec<f64>>>;
}

/// Outcome of one stage fixed point.
#[derive(Debug, Clone)]
pub(crate) struct StageSolution {
    pub law: LocalLaw,
    /// Value of the returned law per active state, `<law(x), a(x,.)>`.
    pub values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct StageParams {
    pub tolerance: f64,
    pub max_iters: usize,
}

/// Iterations at which a Newton polish of the mixing support is attempted.
const POLISH_SCHEDULE: [usize; 8] = [12, 40, 100, 250, 600, 1500, 4000, 9000];

/// Largest indifference system the polish will attempt.
const MAX_POLISH_DIM: usize = 24;

fn max_abs(values: &[Vec<f64>]) -> f64 {
    values
        .iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Residual, per-state pure best responses (lowest index on exact ties)
/// and per-state value of `law` itself.
fn residual_and_br(
    law: &LocalLaw,
    active: &[usize],
    values: &[Vec<f64>],
) -> (f64, Vec<usize>, Vec<f64>) {
    let mut residual = 0.0f64;
    let mut br = Vec::with_capacity(active.len());
    let mut own = Vec::with_capacity(active.len());
    for (i, &x) in active.iter().enumerate() {
        let a = &values[i];
        let mut best = 0;
        for (u, &v) in a.iter().enumerate() {
            if v < a[best] {
                best = u;
            }
        }
        let own_value: f64 = law.row(x).iter().zip(a).map(|(w, v)| w * v).sum();
        residual = residual.max(own_value - a[best]);
        br.push(best);
        own.push(own_value);
    }
    (residual, br, own)
}

fn pure_candidate(base: &LocalLaw, active: &[usize], br: &[usize]) -> LocalLaw {
    let mut law = base.clone();
    for (&x, &u) in active.iter().zip(br) {
        let mut row = vec![0.0; base.num_actions()];
        row[u] = 1.0;
        law.set_row(x, row);
    }
    law
}

pub(crate) fn solve_stage_fixed_point(
    obj: &dyn StageObjective,
    params: StageParams,
) -> Result<StageSolution> {
    solve_from(obj, params, LocalLaw::uniform(obj.num_states(), obj.num_actions()))
}

/// Runs the iteration from an explicit initial law (used by the
/// multiple-equilibria probe; the default entry point starts uniform).
pub(crate) fn solve_from(
    obj: &dyn StageObjective,
    params: StageParams,
    init: LocalLaw,
) -> Result<StageSolution> {
    let active = obj.active_states();
    let mut law = init;
    let mut best: Option<StageSolution> = None;
    let mut prev_br: Option<Vec<usize>> = None;
    let mut last_checked: Option<Vec<usize>> = None;
    let mut polish_at = 0usize;

    for k in 0..params.max_iters {
        let a = obj.action_values(&law, false)?;
        let scale = max_abs(&a).max(1.0);
        let tol = params.tolerance * scale;
        let (residual, br, own_values) = residual_and_br(&law, active, &a);
        if residual <= tol {
            return Ok(StageSolution {
                law,
                values: own_values,
                residual,
                iterations: k,
                converged: true,
            });
        }
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(StageSolution {
                law: law.clone(),
                values: own_values,
                residual,
                iterations: k,
                converged: false,
            });
        }

        // A pure profile that best-responds to itself is an exact
        // equilibrium; test stable pure best responses directly.
        let stable = k == 0 || prev_br.as_deref() == Some(br.as_slice());
        if stable && last_checked.as_deref() != Some(br.as_slice()) {
            let cand = pure_candidate(&law, active, &br);
            let ac = obj.action_values(&cand, true)?;
            let (rc, _, vc) = residual_and_br(&cand, active, &ac);
            last_checked = Some(br.clone());
            if rc <= params.tolerance * max_abs(&ac).max(1.0) {
                return Ok(StageSolution {
                    law: cand,
                    values: vc,
                    residual: rc,
                    iterations: k + 1,
                    converged: true,
                });
            }
            if best.as_ref().is_none_or(|b| rc < b.residual) {
                best = Some(StageSolution {
                    law: cand,
                    values: vc,
                    residual: rc,
                    iterations: k + 1,
                    converged: false,
                });
            }
        }

        if polish_at < POLISH_SCHEDULE.len() && k == POLISH_SCHEDULE[polish_at] {
            polish_at += 1;
            if let Some(sol) = newton_polish(obj, &law, &a, residual, params, k)? {
                return Ok(sol);
            }
        }

        // Damped averaged update toward the pure best response.
        let step = 1.0 / (k as f64 + 2.0);
        for (&x, &u) in active.iter().zip(&br) {
            let mut row = law.row(x).to_vec();
            for (j, p) in row.iter_mut().enumerate() {
                let target = f64::from(j == u);
                *p += step * (target - *p);
            }
            law.set_row(x, row);
        }
        prev_br = Some(br);
    }

    Ok(best.expect("at least one iterate evaluated"))
}

/// Newton solve of the indifference system on the near-optimal support of
/// the current iterate. Unknowns are the row entries on the support;
/// equations are per-state value indifference plus row normalization.
/// The polished law is accepted only if its exact residual meets the
/// tolerance.
fn newton_polish(
    obj: &dyn StageObjective,
    law: &LocalLaw,
    values: &[Vec<f64>],
    residual: f64,
    params: StageParams,
    iterations_so_far: usize,
) -> Result<Option<StageSolution>> {
    let active = obj.active_states();
    let scale = max_abs(values).max(1.0);
    let gap_tol = (10.0 * residual).max(1e-9 * scale);

    // Support per active state: actions within gap_tol of the row minimum.
    let mut support: Vec<Vec<usize>> = Vec::with_capacity(active.len());
    let mut dim = 0usize;
    let mut mixing = false;
    for a in values {
        let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
        let s: Vec<usize> = (0..a.len()).filter(|&u| a[u] - min <= gap_tol).collect();
        dim += s.len();
        if s.len() > 1 {
            mixing = true;
        }
        support.push(s);
    }
    if !mixing || dim > MAX_POLISH_DIM {
        return Ok(None);
    }

    // Initial point: current row mass renormalized onto the support.
    let mut theta = Vec::with_capacity(dim);
    for ((&x, s), a) in active.iter().zip(&support).zip(values) {
        let row = law.row(x);
        let mass: f64 = s.iter().map(|&u| row[u]).sum();
        if mass <= 0.0 {
            // Degenerate start; spread uniformly over the support.
            theta.extend(s.iter().map(|_| 1.0 / s.len() as f64));
        } else {
            theta.extend(s.iter().map(|&u| row[u] / mass));
        }
        let _ = a;
    }

    let embed = |theta: &[f64]| -> LocalLaw {
        let mut out = law.clone();
        let mut pos = 0;
        for (&x, s) in active.iter().zip(&support) {
            let mut row = vec![0.0; obj.num_actions()];
            for &u in s {
                row[u] = theta[pos];
                pos += 1;
            }
            out.set_row(x, row);
        }
        LocalLaw::from_rows_unchecked(out.rows().to_vec())
    };

    // F(theta): per state, indifference of support actions to the first
    // support action, then normalization.
    let eval_f = |theta: &[f64]| -> Result<Vec<f64>> {
        let l = embed(theta);
        let a = obj.action_values(&l, false)?;
        let mut f = Vec::with_capacity(dim);
        let mut pos = 0;
        for (i, s) in support.iter().enumerate() {
            let base = a[i][s[0]];
            for &u in &s[1..] {
                f.push(a[i][u] - base);
            }
            let mass: f64 = (0..s.len()).map(|j| theta[pos + j]).sum();
            f.push(mass - 1.0);
            pos += s.len();
        }
        Ok(f)
    };

    let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let feasible =
        |theta: &[f64]| theta.iter().all(|&p| (-1e-6..=1.0 + 1e-6).contains(&p));

    // Damped least-squares (Levenberg-Marquardt) iteration. The
    // indifference system can be rank-deficient: when continuation values
    // tie, whole families of laws are equilibria, so a plain Newton solve
    // would hit a singular Jacobian.
    let mut f0 = eval_f(&theta)?;
    let h = 1e-7;
    let mut lambda = 1e-6;
    'outer: for _ in 0..15 {
        if norm_inf(&f0) <= 1e-13 * scale {
            break;
        }
        // Forward-difference Jacobian.
        let mut jac = vec![vec![0.0; dim]; dim];
        for j in 0..dim {
            let mut probe = theta.clone();
            probe[j] += h;
            let fj = eval_f(&probe)?;
            for (i, row) in jac.iter_mut().enumerate() {
                row[j] = (fj[i] - f0[i]) / h;
            }
        }
        // Normal equations J^T J and J^T F.
        let mut jtj = vec![vec![0.0; dim]; dim];
        let mut jtf = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                jtj[i][j] = jac.iter().map(|row| row[i] * row[j]).sum();
            }
            jtf[i] = jac.iter().zip(&f0).map(|(row, f)| row[i] * f).sum();
        }
        loop {
            let mut a = jtj.clone();
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += lambda * (jtj[i][i].abs() + 1e-12);
            }
            let accepted = if let Some(delta) = solve_linear(&mut a, &jtf) {
                let probe: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - d).collect();
                if feasible(&probe) {
                    let fp = eval_f(&probe)?;
                    if norm_inf(&fp) < norm_inf(&f0) {
                        theta = probe;
                        f0 = fp;
                        lambda = (lambda * 0.3).max(1e-12);
                        true
                    } else {
                        false
                    }
                } else {
                    false
                }
            } else {
                false
            };
            if accepted {
                break;
            }
            lambda *= 10.0;
            if lambda > 1e8 {
                break 'outer;
            }
        }
    }

    // Clamp onto the simplex and verify the exact residual.
    let mut pos = 0;
    let mut clamped = theta.clone();
    for s in &support {
        let seg = &mut clamped[pos..pos + s.len()];
        for p in seg.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        let mass: f64 = seg.iter().sum();
        if mass <= 0.0 {
            return Ok(None);
        }
        for p in seg.iter_mut() {
            *p /= mass;
        }
        pos += s.len();
    }
    let polished = embed(&clamped);
    let a = obj.action_values(&polished, true)?;
    let (rp, _, vp) = residual_and_br(&polished, active, &a);
    if rp <= params.tolerance * max_abs(&a).max(1.0) {
        return Ok(Some(StageSolution {
            law: polished,
            values: vp,
            residual: rp,
            iterations: iterations_so_far,
            converged: true,
        }));
    }
    Ok(None)
}

/// Gaussian elimination with partial pivoting; returns `None` when the
/// system is numerically singular.
fn solve_linear(a: &mut [Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        x.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut sum = x[col];
        for k in col + 1..n {
            sum -= a[col][k] * x[k];
        }
        x[col] = sum / a[col][col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single-state 2-action game with a strictly dominant first action.
    struct Dominant;

    impl StageObjective for Dominant {
        fn num_states(&self) -> usize {
            1
        }
        fn num_actions(&self) -> usize {
            2
        }
        fn active_states(&self) -> &[usize] {
            &[0]
        }
        fn action_values(&self, _law: &LocalLaw, _reusable: bool) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![1.0, 2.0]])
        }
    }

    #[test]
    fn dominant_action_found_immediately_with_zero_residual() {
        let sol = solve_stage_fixed_point(&Dominant, StageParams {
            tolerance: 1e-8,
            max_iters: 100,
        })
        .unwrap();
        assert!(sol.converged);
        assert_eq!(sol.law.row(0), &[1.0, 0.0]);
        assert_eq!(sol.residual, 0.0);
        assert!(sol.iterations <= 1);
        assert_eq!(sol.values, vec![1.0]);
    }

    /// Anti-coordination: the cost of an action grows with the fraction of
    /// the population playing it. a(u) = base[u] + w[u] * pop(u).
    struct AntiCoordination {
        base: [f64; 2],
        weight: [f64; 2],
    }

    impl StageObjective for AntiCoordination {
        fn num_states(&self) -> usize {
            1
        }
        fn num_actions(&self) -> usize {
            2
        }
        fn active_states(&self) -> &[usize] {
            &[0]
        }
        fn action_values(&self, law: &LocalLaw, _reusable: bool) -> Result<Vec<Vec<f64>>> {
            let p = law.row(0);
            Ok(vec![vec![
                self.base[0] + self.weight[0] * p[0],
                self.base[1] + self.weight[1] * p[1],
            ]])
        }
    }

    #[test]
    fn mixed_equilibrium_matches_indifference_solution() {
        // base0 + w0 p = base1 + w1 (1-p)  =>  p = (base1 + w1 - base0) / (w0 + w1)
        let game = AntiCoordination {
            base: [0.2, 0.5],
            weight: [1.0, 2.0],
        };
        let expected = (0.5 + 2.0 - 0.2) / 3.0;
        let sol = solve_stage_fixed_point(&game, StageParams {
            tolerance: 1e-10,
            max_iters: 10_000,
        })
        .unwrap();
        assert!(sol.converged, "residual {}", sol.residual);
        assert!((sol.law.row(0)[0] - expected).abs() < 1e-9);
        assert!(sol.residual <= 1e-10 * 3.0);
    }

    #[test]
    fn degenerate_objective_accepts_uniform() {
        struct Flat;
        impl StageObjective for Flat {
            fn num_states(&self) -> usize {
                1
            }
            fn num_actions(&self) -> usize {
                3
            }
            fn active_states(&self) -> &[usize] {
                &[0]
            }
            fn action_values(&self, _: &LocalLaw, _: bool) -> Result<Vec<Vec<f64>>> {
                Ok(vec![vec![4.0, 4.0, 4.0]])
            }
        }
        let sol = solve_stage_fixed_point(&Flat, StageParams {
            tolerance: 1e-8,
            max_iters: 10,
        })
        .unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.law.row(0), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn linear_solver_handles_pivoting() {
        let mut a = vec![vec![0.0, 2.0], vec![1.0, 1.0]];
        let x = solve_linear(&mut a, &[2.0, 3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }
}
