//! Constrained f-divergence DRO, `D_f(q) <= 1`, through a noisy search over the multiplier
//! `nu` of the penalized problem: `h(nu) = nu + min_x L_{nu f}(x)` is convex and
//! `B_f`-Lipschitz on `[0, B_l]`, and its minimum is the constrained optimum.

use crate::accel::{outer_solve, AccelConstants, AccelParams};
use crate::broo_fdiv::{DualEpochSgd, RestartedVr};
use crate::error::{invalid, DroError, Result};
use crate::problem::Problem;
use crate::rng::Rng;

/// Query history of the multiplier search.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NuBisectionState {
    pub lo: f64,
    pub hi: f64,
    /// `(nu, G(nu))` in query order.
    pub queries: Vec<(f64, f64)>,
    /// Repetitions of the regularized solve per query.
    pub rep: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneDimResult {
    pub y: f64,
    pub value: f64,
    pub queries: u32,
}

/// Noisy ternary search for a convex `B`-Lipschitz function on `[lo, hi]` seen through an
/// oracle with error at most `tilde_eps`. Each round queries the two interior third points
/// and drops the outer third beyond the larger value; the best queried point is returned.
/// Runs `ceil(log_{3/2}(B (hi - lo) / tilde_eps))` rounds.
pub fn one_dim_minimizer(
    mut oracle: impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    tilde_eps: f64,
    lipschitz: f64,
) -> Result<OneDimResult> {
    if !(hi >= lo) || !(tilde_eps > 0.0) || !(lipschitz >= 0.0) {
        return Err(invalid("interval", "need lo <= hi, tilde_eps > 0 and B >= 0"));
    }
    let (mut l, mut u) = (lo, hi);
    let ratio = lipschitz * (hi - lo) / tilde_eps;
    let rounds = if ratio > 1.0 { ratio.ln() / 1.5f64.ln() } else { 0.0 }.ceil() as u32;
    let mut best_y = l;
    let mut best = oracle(l)?;
    let mut queries = 1;
    for _ in 0..rounds {
        let (zl, zu) = ((2.0 * l + u) / 3.0, (l + 2.0 * u) / 3.0);
        let (gl, gu) = (oracle(zl)?, oracle(zu)?);
        queries += 2;
        if gl <= gu {
            u = zu;
            if gl <= best {
                (best, best_y) = (gl, zl);
            }
        } else {
            l = zl;
            if gu <= best {
                (best, best_y) = (gu, zu);
            }
        }
    }
    Ok(OneDimResult { y: best_y, value: best, queries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedResult {
    pub x: Vec<f64>,
    pub nu: f64,
    /// `L_{nu f}(x) + nu` at the returned pair, an upper bound on the constrained objective at `x`.
    pub value: f64,
    pub inner_solves: u64,
    /// `B_f B_l / eps`.
    pub h: f64,
    pub state: NuBisectionState,
}

/// Repetitions per multiplier query, `ceil(log2(100 log H))`.
pub fn repetitions(h: f64) -> u32 {
    (100.0 * h.ln().max(1.0)).log2().ceil() as u32
}

/// Minimizes the constrained objective to accuracy `eps`. `solver` returns an approximate
/// minimizer of the penalized problem it is given (accuracy `eps/5` is encoded in that
/// problem's `eps`). Each multiplier query keeps the smallest exact `L_{nu f}(x) + nu` over
/// its repetitions.
pub fn solve_constrained_fdiv(
    problem: &Problem,
    eps: f64,
    mut solver: impl FnMut(&Problem, &mut Rng) -> Result<Vec<f64>>,
    rng: &mut Rng,
) -> Result<ConstrainedResult> {
    let div = problem
        .divergence()
        .ok_or_else(|| DroError::Config("the multiplier driver needs an f-divergence problem".into()))?;
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be positive"));
    }
    let b_loss = problem.constants().loss_bound;
    if !b_loss.is_finite() {
        return Err(DroError::UnboundedLosses);
    }
    let b_f = div.f_bound();
    let h = b_f * b_loss / eps;
    let rep = repetitions(h);
    let mut state = NuBisectionState { lo: 0.0, hi: b_loss, queries: Vec::new(), rep };
    let mut points: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut inner = 0u64;
    let oracle = |nu: f64| -> Result<f64> {
        let wrap = |e: DroError| DroError::InnerSolve { nu, source: Box::new(e) };
        let p = problem.with_multiplier(nu).and_then(|p| p.with_eps(eps / 5.0)).map_err(wrap)?;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..rep {
            let x = solver(&p, rng).map_err(wrap)?;
            inner += 1;
            let v = p.true_objective(&x).map_err(wrap)? + nu;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, x));
            }
        }
        let (v, x) = best.expect("at least one repetition");
        state.queries.push((nu, v));
        points.push((nu, x));
        Ok(v)
    };
    let res = one_dim_minimizer(oracle, 0.0, b_loss, eps / 5.0, b_f)?;
    let x = points
        .into_iter()
        .find(|(nu, _)| *nu == res.y)
        .map(|(_, x)| x)
        .expect("returned multiplier was queried");
    Ok(ConstrainedResult { x, nu: res.y, value: res.value, inner_solves: inner, h, state })
}

/// Regularized solver for the driver: the accelerated outer loop started at the domain
/// center, over the restarted VR ball oracle (`variance_reduced`, smooth losses only) or
/// dual epoch-SGD.
pub fn accel_dual_solver(
    consts: AccelConstants,
    variance_reduced: bool,
) -> impl FnMut(&Problem, &mut Rng) -> Result<Vec<f64>> {
    move |p: &Problem, rng: &mut Rng| {
        let params = AccelParams::for_problem(p, consts)?;
        let x0 = p.domain().center.clone();
        let out = if variance_reduced {
            outer_solve(&RestartedVr::new(p)?, &params, &x0, rng, |_, _| {})?
        } else {
            outer_solve(&DualEpochSgd::new(p)?, &params, &x0, rng, |_, _| {})?
        };
        Ok(out.x)
    }
}
