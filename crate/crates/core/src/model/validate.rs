//! Structural and numeric validation of a [`GameSpec`].
//!
//! Probability-dependent invariants (kernel row normalization, cost
//! nonnegativity) are checked on a deterministic sampling grid over the
//! state simplex: every vertex plus the uniform point.

use serde::{Deserialize, Serialize};

use crate::model::cost::{CostForm, StateCost};
use crate::model::kernel::KernelForm;
use crate::model::{simplex_probe_points, GameSpec, Horizon, PROB_TOL};

/// One violated invariant with the location it was observed at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

/// Result of validating a model; empty issue list means pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            path: path.into(),
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passed() {
            return f.write_str("pass");
        }
        for issue in &self.issues {
            writeln!(f, "{}: {}", issue.path, issue.message)?;
        }
        Ok(())
    }
}

/// Validates every model invariant and reports all violations found.
pub fn validate(spec: &GameSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nx = spec.num_states();
    let nu = spec.num_actions();

    if spec.n < 2 {
        report.push("n", format!("population size {} must be >= 2", spec.n));
    }

    match spec.horizon {
        Horizon::Finite { t } => {
            if t == 0 {
                report.push("horizon", "horizon must be >= 1");
            }
        }
        Horizon::Discounted { beta } => {
            if !(0.0 < beta && beta < 1.0) {
                report.push("horizon.beta", format!("beta {beta} outside (0,1)"));
            }
            if !spec.kernel.time_homogeneous {
                report.push("kernel", "discounted mode requires a time-homogeneous kernel");
            }
            if !spec.cost.time_homogeneous {
                report.push("cost", "discounted mode requires a time-homogeneous cost");
            }
        }
    }

    if spec.initial_dist.len() != nx {
        report.push(
            "initial_dist",
            format!("length {} != |X| = {nx}", spec.initial_dist.len()),
        );
    } else {
        let sum: f64 = spec.initial_dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            report.push("initial_dist", format!("sums to {sum}, expected 1"));
        }
        for (x, &p) in spec.initial_dist.iter().enumerate() {
            if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) {
                report.push(format!("initial_dist[{x}]"), format!("entry {p} outside [0,1]"));
            }
        }
    }

    check_kernel_shape(spec, nx, nu, &mut report);
    check_cost_shape(spec, nx, nu, &mut report);
    if !report.passed() {
        // Numeric probing below indexes by shape; skip it on malformed shapes.
        return report;
    }

    let stages = probe_stages(spec);
    let probes = simplex_probe_points(nx);

    for &t in &stages {
        for x in 0..nx {
            for u in 0..nu {
                for d in &probes {
                    let row = spec.kernel.row(t, x, u, d);
                    let mut sum = 0.0;
                    for (y, &p) in row.iter().enumerate() {
                        if p < -PROB_TOL || p > 1.0 + PROB_TOL {
                            report.push(
                                format!("kernel[t={t}][x={x}][u={u}][y={y}]"),
                                format!("probability {p} outside [0,1] at d={d:?}"),
                            );
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > PROB_TOL {
                        report.push(
                            format!("kernel[t={t}][x={x}][u={u}]"),
                            format!("row sum {sum} != 1 at d={d:?}"),
                        );
                    }
                }
            }
        }
    }

    // Cost nonnegativity at marginal probes paired with deterministic action
    // splits: every pure split and the uniform split.
    for &t in &stages {
        for x in 0..nx {
            for u in 0..nu {
                for d in &probes {
                    for dd in joint_probe_points(d, nu) {
                        let c = spec.cost.eval(t, x, u, &dd, spec.n.max(2));
                        if c < 0.0 {
                            report.push(
                                format!("cost[t={t}][x={x}][u={u}]"),
                                format!("cost must be nonnegative, got {c} at d={d:?}"),
                            );
                        }
                    }
                }
            }
        }
    }

    report
}

/// Stages to probe: all tabulated stages for finite time-varying models,
/// otherwise the single homogeneous slice.
fn probe_stages(spec: &GameSpec) -> Vec<usize> {
    let tab = spec
        .kernel
        .tabulated_stages()
        .into_iter()
        .chain(cost_stages(spec))
        .max()
        .unwrap_or(1);
    let horizon_stages = spec.horizon.stages().unwrap_or(1);
    (1..=tab.max(1).min(horizon_stages.max(1))).collect()
}

fn cost_stages(spec: &GameSpec) -> Option<usize> {
    match &spec.cost.form {
        CostForm::DOnly(c) => c.tabulated_stages(),
        CostForm::Separable {
            noncooperative,
            cooperative,
        } => noncooperative
            .tabulated_stages()
            .into_iter()
            .chain(cooperative.tabulated_stages())
            .max(),
        CostForm::GeneralInD { .. } => None,
    }
}

fn joint_probe_points(d: &[f64], nu: usize) -> Vec<Vec<Vec<f64>>> {
    let nx = d.len();
    let mut points = Vec::with_capacity(nu + 1);
    for u in 0..nu {
        let mut dd = vec![vec![0.0; nu]; nx];
        for x in 0..nx {
            dd[x][u] = d[x];
        }
        points.push(dd);
    }
    let mut uniform = vec![vec![0.0; nu]; nx];
    for x in 0..nx {
        for u in 0..nu {
            uniform[x][u] = d[x] / nu as f64;
        }
    }
    points.push(uniform);
    points
}

fn check_kernel_shape(
    spec: &GameSpec,
    nx: usize,
    nu: usize,
    report: &mut ValidationReport,
) {
    let check_t3 = |probs: &[crate::model::Tensor3], what: &str, report: &mut ValidationReport| {
        for (t, slice) in probs.iter().enumerate() {
            if slice.len() != nx {
                report.push(format!("{what}[t={t}]"), format!("has {} state rows, expected {nx}", slice.len()));
                continue;
            }
            for (x, per_u) in slice.iter().enumerate() {
                if per_u.len() != nu {
                    report.push(
                        format!("{what}[t={t}][x={x}]"),
                        format!("has {} action rows, expected |U| = {nu}", per_u.len()),
                    );
                    continue;
                }
                for (u, row) in per_u.iter().enumerate() {
                    if row.len() != nx {
                        report.push(
                            format!("{what}[t={t}][x={x}][u={u}]"),
                            format!("row length {} != |X| = {nx}", row.len()),
                        );
                    }
                }
            }
        }
    };
    match &spec.kernel.form {
        KernelForm::Tabular { probs } => {
            if probs.is_empty() {
                report.push("kernel.probs", "no stage slices");
            }
            check_t3(probs, "kernel.probs", report);
        }
        KernelForm::AffineInD { base, slope } => {
            if base.is_empty() {
                report.push("kernel.probs", "no stage slices");
            }
            check_t3(base, "kernel.probs", report);
            if slope.len() != base.len() {
                report.push("kernel.d_dependence", "slope stages != base stages");
            }
            for (t, s) in slope.iter().enumerate() {
                if s.len() != nx {
                    report.push(format!("kernel.d_dependence[t={t}]"), "bad state dimension");
                    continue;
                }
                for per_u in s {
                    for per_y in per_u {
                        for per_z in per_y {
                            if per_z.len() != nx {
                                report.push(
                                    format!("kernel.d_dependence[t={t}]"),
                                    "slope d-dimension != |X|",
                                );
                            }
                        }
                    }
                }
            }
        }
        KernelForm::Callable { .. } => {}
    }
    if !spec.kernel.time_homogeneous {
        if let (Some(avail), Some(t)) = (spec.kernel.tabulated_stages(), spec.horizon.stages()) {
            if avail < t {
                report.push(
                    "kernel",
                    format!("time-varying kernel has {avail} stages, horizon needs {t}"),
                );
            }
        }
    }
}

fn check_cost_shape(spec: &GameSpec, nx: usize, nu: usize, report: &mut ValidationReport) {
    let check_part = |part: &StateCost, what: &str, report: &mut ValidationReport| match part {
        StateCost::Tabular { values } => {
            for (t, slice) in values.iter().enumerate() {
                if slice.len() != nx || slice.iter().any(|r| r.len() != nu) {
                    report.push(format!("{what}[t={t}]"), format!("table shape != |X| x |U| = {nx}x{nu}"));
                }
            }
        }
        StateCost::Affine { base, slope } => {
            for (t, slice) in base.iter().enumerate() {
                if slice.len() != nx || slice.iter().any(|r| r.len() != nu) {
                    report.push(format!("{what}.base[t={t}]"), "shape mismatch");
                }
            }
            for (t, slice) in slope.iter().enumerate() {
                if slice.len() != nx
                    || slice
                        .iter()
                        .any(|per_u| per_u.len() != nu || per_u.iter().any(|v| v.len() != nx))
                {
                    report.push(format!("{what}.slope[t={t}]"), "shape mismatch");
                }
            }
        }
        StateCost::RequestBand {
            underload,
            overload,
            alpha,
            gamma,
        } => {
            if nx != 2 {
                report.push(what.to_string(), "request band cost requires a binary state space");
            }
            if *underload < 0.0 || *overload < 0.0 {
                report.push(what.to_string(), "band penalties must be nonnegative");
            }
            if alpha > gamma {
                report.push(what.to_string(), format!("alpha {alpha} > gamma {gamma}"));
            }
        }
        StateCost::Callable { .. } => {}
    };
    match &spec.cost.form {
        CostForm::DOnly(c) => check_part(c, "cost.d_only", report),
        CostForm::Separable {
            noncooperative,
            cooperative,
        } => {
            check_part(noncooperative, "cost.noncooperative", report);
            check_part(cooperative, "cost.cooperative", report);
        }
        CostForm::GeneralInD { .. } => {}
    }
}
