use popgame::dss::{DssSolver, SolverParams};
use popgame::model::{build_example1_with, Horizon};

fn main() {
    let spec = build_example1_with(5, 1.0, 4.0, Horizon::Finite { t: 3 });
    let solver = DssSolver::new(&spec, SolverParams::default()).unwrap();
    let sol = solver.solve_finite().unwrap();
    for e in &sol.report.entries {
        if !e.converged || e.residual > 1e-9 {
            println!(
                "t={} d={:?} iters={} residual={:.3e} converged={}",
                e.t, e.d_counts, e.iterations, e.residual, e.converged
            );
        }
    }
    println!("max residual {:.3e}", sol.report.max_residual());
}
