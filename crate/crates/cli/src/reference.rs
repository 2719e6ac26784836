//! Independent estimates of the optimal value, stored with generated instances.

use anyhow::{bail, Result};
use dro_core::baselines::subgradient_solve;
use dro_core::problem::Problem;
use dro_core::trace::TraceRecorder;

/// Grid steps per domain radius for the grid search.
pub const GRID_STEPS: i64 = 400;

/// Minimum of the exact objective over a square grid clipped to the domain, `d <= 2`.
pub fn grid_optimum(problem: &Problem) -> Result<f64> {
    let dom = problem.domain();
    let (c, rad) = (&dom.center, dom.radius);
    let h = rad / GRID_STEPS as f64;
    let mut best = f64::INFINITY;
    match c.len() {
        1 => {
            for i in -GRID_STEPS..=GRID_STEPS {
                best = best.min(problem.peek_true_objective(&[c[0] + i as f64 * h])?);
            }
        }
        2 => {
            for i in -GRID_STEPS..=GRID_STEPS {
                for j in -GRID_STEPS..=GRID_STEPS {
                    let x = [c[0] + i as f64 * h, c[1] + j as f64 * h];
                    if dom.contains(&x) {
                        best = best.min(problem.peek_true_objective(&x)?);
                    }
                }
            }
        }
        d => bail!("grid reference needs dimension at most 2, got {d}"),
    }
    Ok(best)
}

/// Default subgradient budget `(G R / eps)^2`.
pub fn subgradient_iters(problem: &Problem) -> u64 {
    let c = problem.constants();
    ((c.lipschitz * c.diameter / problem.eps).powi(2)).ceil().max(1.0) as u64
}

/// Best objective seen along a subgradient run with `factor` times the default budget.
pub fn long_run_optimum(problem: &Problem, factor: u64) -> Result<f64> {
    let iters = subgradient_iters(problem) * factor;
    let stride = (iters / 2000).max(1);
    let rec = TraceRecorder::new(problem, None).with_stride(stride);
    let x0 = problem.domain().center.clone();
    let trace = subgradient_solve(problem, &x0, iters, rec)?;
    Ok(trace.records.iter().map(|r| r.objective).fold(trace.objective, f64::min))
}

/// Grid search in dimension at most 2, otherwise a subgradient run with 100 times the budget.
pub fn reference_optimum(problem: &Problem) -> Result<f64> {
    if problem.is_constrained() {
        bail!("reference optima for constrained problems are not computed");
    }
    if problem.dim() <= 2 {
        grid_optimum(problem)
    } else {
        long_run_optimum(problem, 100)
    }
}
