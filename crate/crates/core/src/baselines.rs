//! Comparison methods on the same metered oracles: projected subgradient descent,
//! primal-dual stochastic mirror descent with clipped entropic dual steps, and accelerated
//! gradient descent on the smoothed objective.

use rand::Rng as _;

use crate::divergence::{Divergence, DivergenceKind};
use crate::error::{invalid, DroError, Result};
use crate::linalg::{axpy, dot, log_sum_exp, norm, softmax};
use crate::problem::{Loss, Problem, Variant};
use crate::rng::Rng;
use crate::trace::{SolverTrace, TraceRecorder};

fn reject_constrained(problem: &Problem) -> Result<()> {
    if problem.is_constrained() {
        return Err(DroError::Config(
            "constrained f-divergence problems run through the multiplier driver".into(),
        ));
    }
    Ok(())
}

/// `sum_j w_j grad l_j(x)` over the nonzero weights, metered.
fn weighted_grad(problem: &Problem, x: &[f64], w: &[f64], all: bool) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut buf = vec![0.0; x.len()];
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 || all {
            problem.ensemble.grad_into(j, x, &mut buf)?;
            axpy(wj, &buf, &mut g);
        }
    }
    Ok(g)
}

/// Robust objective from a vector of loss values, without further evaluations.
fn objective_from_values(problem: &Problem, vals: &[f64]) -> f64 {
    match &problem.variant {
        Variant::Group(g) => g.combine(vals).into_iter().fold(f64::NEG_INFINITY, f64::max),
        Variant::FDiv { divergence, .. } => divergence.worst_case(vals).0,
    }
}

/// Projected subgradient descent on the unsmoothed objective with steps `R / (G sqrt(t))`.
/// Reports the step-weighted average of the query points; each step costs a full pass of
/// values plus the gradients of the active losses.
pub fn subgradient_solve(problem: &Problem, x0: &[f64], iters: u64, mut rec: TraceRecorder<'_>) -> Result<SolverTrace> {
    reject_constrained(problem)?;
    problem.ensemble.check_point(x0)?;
    let (r, g) = (problem.diameter(), problem.lipschitz());
    let mut x = x0.to_vec();
    let mut avg = x0.to_vec();
    let mut weight = 0.0;
    for t in 1..=iters {
        let vals = problem.ensemble.values(&x)?;
        let q = problem.worst_case_weights(&vals);
        let sub = weighted_grad(problem, &x, &q, false)?;
        let eta = r / (g * (t as f64).sqrt());
        weight += eta;
        let frac = eta / weight;
        for (a, xi) in avg.iter_mut().zip(&x) {
            *a += frac * (xi - *a);
        }
        axpy(-eta, &sub, &mut x);
        x = problem.domain().project(&x);
        rec.record(&avg)?;
    }
    rec.finish("subgradient", avg)
}

/// Iterate of the primal-dual method.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub x: Vec<f64>,
    /// Weights over groups, or over losses for f-divergence problems.
    pub q: Vec<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualOutput {
    pub trace: SolverTrace,
    pub q_avg: Vec<f64>,
    pub state: PrimalDualState,
}

/// `c_eta * eps * log m / (G^2 R^2 + m B^2)` with `m` clamped to at least 2.
pub fn default_pd_step(problem: &Problem, c_eta: f64) -> Result<f64> {
    let c = problem.constants();
    if !c.loss_bound.is_finite() {
        return Err(DroError::UnboundedLosses);
    }
    let m = problem.support_size().max(2) as f64;
    Ok(c_eta * problem.eps * m.ln() / ((c.lipschitz * c.diameter).powi(2) + m * c.loss_bound.powi(2)))
}

fn sample_from(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// `argmax_q <q, s> - eta psi(q) - sum q log q` over the simplex, with `s` already holding
/// `log q_t` plus the clipped step.
fn entropic_step(div: Option<&Divergence>, eta: f64, s: &[f64]) -> Vec<f64> {
    let Some(d) = div.filter(|d| !d.is_null()) else {
        return softmax(s, 1.0);
    };
    match d.kind() {
        DivergenceKind::Zero => softmax(s, 1.0),
        DivergenceKind::Cvar { .. } => capped_softmax(s, d.domain_upper().min(1.0)),
        DivergenceKind::Chi2 { rho } => quadratic_entropic(s, eta * d.nu() / rho * d.n() as f64, eta * d.nu() / rho),
    }
}

/// `q_i = min(cap, e^{s_i - mu})` summing to one.
fn capped_softmax(s: &[f64], cap: f64) -> Vec<f64> {
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    // suffix[k] = log sum over order[k..] of e^{s}
    let mut suffix = vec![f64::NEG_INFINITY; n + 1];
    for k in (0..n).rev() {
        let (a, b) = (suffix[k + 1], s[order[k]]);
        let m = a.max(b);
        suffix[k] = m + ((a - m).exp() + (b - m).exp()).ln();
    }
    let mut q = vec![0.0; n];
    for k in 0..n {
        let left = 1.0 - k as f64 * cap;
        if left <= 0.0 {
            break;
        }
        let mu = suffix[k] - left.ln();
        if (s[order[k]] - mu).exp() <= cap * (1.0 + 1e-12) {
            for (pos, &i) in order.iter().enumerate() {
                q[i] = if pos < k { cap } else { (s[i] - mu).exp().min(cap) };
            }
            break;
        }
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    q
}

/// Root of `u + k e^u = b`.
fn log_weight(b: f64, k: f64) -> f64 {
    let t = k.ln() + b;
    let softplus = if t > 30.0 { t } else { t.exp().ln_1p() };
    let mut u = b - softplus;
    for _ in 0..100 {
        let e = k * u.exp();
        let step = (u + e - b) / (1.0 + e);
        u -= step;
        if step.abs() <= 1e-15 * (1.0 + u.abs()) {
            break;
        }
    }
    u
}

/// Stationarity `log q_i + c (N q_i - 1) = s_i - mu`, with `k = c N`.
fn quadratic_entropic(s: &[f64], k: f64, c: f64) -> Vec<f64> {
    let total = |mu: f64| -> (f64, Vec<f64>) {
        let q: Vec<f64> = s.iter().map(|&si| log_weight(si - mu + c, k).exp()).collect();
        (q.iter().sum(), q)
    };
    let mut hi = log_sum_exp(s) + c;
    let mut lo = hi - 1.0;
    while total(lo).0 < 1.0 {
        lo -= 2.0 * (hi - lo);
    }
    let mut mu = hi;
    let mut q = total(mu).1;
    for _ in 0..200 {
        let (sum, qs) = total(mu);
        q = qs;
        if (sum - 1.0).abs() <= 1e-14 {
            break;
        }
        if sum > 1.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        let slope: f64 = q.iter().map(|&v| v / (1.0 + k * v)).sum();
        let newton = mu + (sum - 1.0) / slope;
        mu = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    let sum: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= sum);
    q
}

/// Primal-dual stochastic mirror descent: a Euclidean step on `x` scaled by `R^2 / (2 log m)`
/// and an entropic step on `q` with its stochastic gradient clipped to `[-1, 1]` entrywise.
/// Penalized f-divergence problems take a composite entropic step that includes the penalty.
/// Each step costs one gradient and one value evaluation. Returns the averaged iterates.
pub fn primal_dual_smd(
    problem: &Problem,
    x0: &[f64],
    iters: u64,
    eta: f64,
    rng: &mut Rng,
    mut rec: TraceRecorder<'_>,
) -> Result<PrimalDualOutput> {
    reject_constrained(problem)?;
    problem.ensemble.check_point(x0)?;
    if !problem.constants().loss_bound.is_finite() {
        return Err(DroError::UnboundedLosses);
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid("eta", "must be positive and finite"));
    }
    let m = problem.support_size();
    let x_scale = problem.diameter().powi(2) / (2.0 * (m.max(2) as f64).ln());
    let div = problem.divergence();
    let member = |i: usize, rng: &mut Rng| match problem.groups() {
        Some(g) => g.sample_member(i, rng),
        None => i,
    };
    let mut state = PrimalDualState { x: x0.to_vec(), q: vec![1.0 / m as f64; m], eta };
    let mut x_avg = x0.to_vec();
    let mut q_avg = state.q.clone();
    for t in 1..=iters {
        let i = sample_from(&state.q, rng);
        let gx = problem.ensemble.grad(member(i, rng), &state.x)?;
        let k = rng.random_range(0..m);
        let lk = problem.ensemble.value(member(k, rng), &state.x)?;
        let frac = 1.0 / t as f64;
        for (a, xi) in x_avg.iter_mut().zip(&state.x) {
            *a += frac * (xi - *a);
        }
        for (a, qi) in q_avg.iter_mut().zip(&state.q) {
            *a += frac * (qi - *a);
        }
        axpy(-eta * x_scale, &gx, &mut state.x);
        state.x = problem.domain().project(&state.x);
        let mut s: Vec<f64> = state.q.iter().map(|v| v.ln()).collect();
        s[k] += (eta * m as f64 * lk).clamp(-1.0, 1.0);
        state.q = entropic_step(div, eta, &s);
        rec.record(&x_avg)?;
    }
    Ok(PrimalDualOutput { trace: rec.finish("primal-dual", x_avg)?, q_avg, state })
}

/// `max_q L(x, q) - min_x' L(x', q_bar)` for the primal-dual objective, measured without
/// metering. The inner minimization is closed form for linear losses and a long projected
/// subgradient run otherwise, so the result slightly underestimates the gap in that case.
pub fn duality_gap(problem: &Problem, x: &[f64], q_bar: &[f64]) -> Result<f64> {
    let upper = problem.peek_true_objective(x)?;
    let (w, offset) = match &problem.variant {
        Variant::Group(g) => (g.pull_back(q_bar, problem.n()), 0.0),
        Variant::FDiv { divergence, .. } => (q_bar.to_vec(), divergence.penalty(q_bar)),
    };
    let ens = &problem.ensemble;
    let domain = problem.domain();
    let value = |z: &[f64]| -> f64 { dot(&w, &ens.peek_values(z)) };
    let linear = ens.losses().iter().all(|l| matches!(l, Loss::Linear { .. }));
    let best = if linear {
        let mut a = vec![0.0; problem.dim()];
        for (j, &wj) in w.iter().enumerate() {
            axpy(wj, &ens.peek_grad(j, &domain.center), &mut a);
        }
        let na = norm(&a);
        let mut z = domain.center.clone();
        if na > 0.0 {
            axpy(-domain.radius / na, &a, &mut z);
        }
        value(&z)
    } else {
        let (r, g) = (problem.diameter(), problem.lipschitz());
        let mut z = domain.center.clone();
        let mut best = value(&z);
        for t in 1..=20_000u64 {
            let mut sub = vec![0.0; z.len()];
            for (j, &wj) in w.iter().enumerate() {
                if wj != 0.0 {
                    axpy(wj, &ens.peek_grad(j, &z), &mut sub);
                }
            }
            axpy(-r / (g * (t as f64).sqrt()), &sub, &mut z);
            domain.project_in_place(&mut z);
            best = best.min(value(&z));
        }
        best
    };
    Ok(upper - (best - offset))
}

/// Accelerated projected gradient descent on the smoothed objective with smoothness
/// `L + G^2 / eps'`. Each iteration costs `N` values and `N` gradients; the best queried
/// point by exact objective is returned.
pub fn agd_softmax(problem: &Problem, x0: &[f64], iters: u64, mut rec: TraceRecorder<'_>) -> Result<SolverTrace> {
    reject_constrained(problem)?;
    problem.ensemble.check_point(x0)?;
    let c = problem.constants();
    if !c.smoothness.is_finite() {
        return Err(DroError::NotSmooth);
    }
    let l_tilde = c.smoothness + c.lipschitz.powi(2) / problem.eps_prime();
    let d = x0.len();
    let (mut x, mut z) = (x0.to_vec(), x0.to_vec());
    let mut theta: f64 = 1.0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..iters {
        let y: Vec<f64> = (0..d).map(|k| (1.0 - theta) * x[k] + theta * z[k]).collect();
        let vals = problem.ensemble.values(&y)?;
        let w = problem.smoothed_weights(&vals)?;
        let g = weighted_grad(problem, &y, &w, true)?;
        let f = objective_from_values(problem, &vals);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, y.clone()));
        }
        axpy(-1.0 / (theta * l_tilde), &g, &mut z);
        z = problem.domain().project(&z);
        for k in 0..d {
            x[k] = (1.0 - theta) * x[k] + theta * z[k];
        }
        let t2 = theta * theta;
        theta = ((t2 * t2 + 4.0 * t2).sqrt() - t2) / 2.0;
        rec.record(&best.as_ref().expect("set above").1)?;
    }
    if iters > 0 {
        let f = objective_from_values(problem, &problem.ensemble.values(&x)?);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, x));
        }
    }
    let out = best.map_or_else(|| x0.to_vec(), |(_, p)| p);
    rec.finish("agd-softmax", out)
}
