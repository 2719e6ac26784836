//! Stochastic accelerated proximal point method on top of a ball oracle.
//!
//! Each outer step picks a regularization `lambda` by bisection so that the proximal point
//! stays inside the oracle's ball, queries the oracle at the momentum point, and moves the
//! dual sequence along a debiased Moreau-envelope gradient.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::broo::{Broo, BrooRequest, BrooResult};
use crate::error::{invalid, Result};
use crate::estimators::GeometricLevelSampler;
use crate::linalg::dist;
use crate::problem::{Counts, Problem};
use crate::rng::Rng;

/// Tunable constants of the outer loop. [`Default`] gives the reference values; see
/// [`AccelConstants::practical`] for a preset that runs at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccelConstants {
    pub c_m: f64,
    pub c_lambda: f64,
    pub c_k: f64,
    /// Upper end of the bisection interval is `lambda_upper * G / r`.
    pub lambda_upper: f64,
    /// `kappa` in `phi = lambda r^2 / kappa` and `sigma^2 = lambda^2 r^2 / kappa`.
    /// `None` means `900 log^3(G R^2 / (eps r))`.
    pub accuracy_denominator: Option<f64>,
    /// Bias target is `eps / (bias_divisor * R)`.
    pub bias_divisor: f64,
    /// Base level size is `t0_factor * G^2 log(T_max) / sigma^2`.
    pub t0_factor: f64,
    /// Failure probability of each high-probability oracle call.
    /// `None` means `1 / (6 K_max m_eps)`.
    pub failure_prob: Option<f64>,
    /// Bisection probes run at accuracy `r / probe_divisor`.
    pub probe_divisor: f64,
    /// Probes closer than `accept_low * r` mean `lambda` is too large.
    pub accept_low: f64,
    /// Probes farther than `accept_high * r` mean `lambda` is too small.
    pub accept_high: f64,
}

impl Default for AccelConstants {
    fn default() -> Self {
        Self {
            c_m: 1.0,
            c_lambda: 1.0,
            c_k: 4.0,
            lambda_upper: 1.0,
            accuracy_denominator: None,
            bias_divisor: 120.0,
            t0_factor: 14.0,
            failure_prob: None,
            probe_divisor: 30.0,
            accept_low: 0.75,
            accept_high: 0.875,
        }
    }
}

impl AccelConstants {
    /// Looser accuracies, fewer outer steps and single-copy probes. Outer steps cost a few
    /// hundred oracle steps instead of millions.
    pub fn practical() -> Self {
        Self {
            c_k: 1.0,
            accuracy_denominator: Some(2000.0),
            t0_factor: 1.0,
            bias_divisor: 8.0,
            failure_prob: Some(0.5),
            probe_divisor: 8.0,
            ..Self::default()
        }
    }
}

/// Derived parameters of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelParams {
    pub g: f64,
    /// Domain diameter.
    pub big_r: f64,
    /// Oracle ball radius.
    pub r: f64,
    /// Target accuracy on the objective the oracle regularizes.
    pub eps: f64,
    /// `log(G R^2 / (eps r))`, at least one.
    pub log_term: f64,
    pub m_eps: u32,
    pub lambda_m: f64,
    pub kappa: f64,
    pub beta: f64,
    pub a0: f64,
    pub a_max: f64,
    pub k_max: u64,
    pub failure_prob: f64,
    pub consts: AccelConstants,
}

impl AccelParams {
    pub fn new(g: f64, big_r: f64, r: f64, eps: f64, consts: AccelConstants) -> Result<Self> {
        for (name, v) in [("G", g), ("R", big_r), ("r", r), ("eps", eps)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name_of(name), "must be positive and finite"));
            }
        }
        let c = consts;
        if !(c.accept_low > 0.0 && c.accept_low < c.accept_high && c.accept_high < 1.0) {
            return Err(invalid("accept_low", "thresholds need 0 < low < high < 1"));
        }
        if c.c_m <= 0.0 || c.c_lambda <= 0.0 || c.c_k <= 0.0 || c.lambda_upper <= 0.0 {
            return Err(invalid("c_m", "outer constants must be positive"));
        }
        if c.bias_divisor <= 0.0 || c.t0_factor <= 0.0 || c.probe_divisor <= 1.0 {
            return Err(invalid("t0_factor", "estimator constants must be positive"));
        }
        let log_term = (g * big_r * big_r / (eps * r)).ln().max(1.0);
        let m_eps = (c.c_m * log_term).ceil().max(1.0) as u32;
        let a_max = 9.0 * big_r * big_r / eps;
        let lambda_m = (c.c_lambda * (m_eps as f64).powi(2) * eps / (r.powf(4.0 / 3.0) * big_r.powf(2.0 / 3.0)))
            .max(1.0 / a_max);
        let kappa = match c.accuracy_denominator {
            Some(k) if k > 2.0 => k,
            Some(_) => return Err(invalid("accuracy_denominator", "must exceed 2")),
            None => 900.0 * log_term.powi(3),
        };
        let k_max = (c.c_k * (big_r / r).powf(2.0 / 3.0) * m_eps as f64).ceil().max(1.0) as u64;
        let failure_prob = match c.failure_prob {
            Some(p) if p > 0.0 && p < 1.0 => p,
            Some(_) => return Err(invalid("failure_prob", "must lie in (0, 1)")),
            None => 1.0 / (6.0 * k_max as f64 * m_eps as f64),
        };
        Ok(Self {
            g,
            big_r,
            r,
            eps,
            log_term,
            m_eps,
            lambda_m,
            kappa,
            beta: eps / (c.bias_divisor * big_r),
            a0: big_r / g,
            a_max,
            k_max,
            failure_prob,
            consts,
        })
    }

    /// Parameters for minimizing the smoothed objective of `problem` to `eps / 2`, which
    /// makes the unsmoothed objective `eps`-suboptimal.
    pub fn for_problem(problem: &Problem, consts: AccelConstants) -> Result<Self> {
        Self::new(problem.lipschitz(), problem.diameter(), problem.r_eps(), problem.eps / 2.0, consts)
    }

    /// Allowed oracle error `phi = lambda r^2 / kappa`.
    pub fn phi(&self, lambda: f64) -> f64 {
        lambda * self.r * self.r / self.kappa
    }

    pub fn sigma_sq(&self, lambda: f64) -> f64 {
        (lambda * self.r).powi(2) / self.kappa
    }

    /// Oracle accuracy of the main proximal step, `sqrt(2 phi / lambda)`.
    pub fn outer_delta(&self) -> f64 {
        self.r * (2.0 / self.kappa).sqrt()
    }

    pub fn lambda_max(&self) -> f64 {
        (self.consts.lambda_upper * self.g / self.r).max(self.lambda_m)
    }

    pub fn probe_delta(&self) -> f64 {
        self.r / self.consts.probe_divisor
    }
}

fn name_of(s: &str) -> &'static str {
    match s {
        "G" => "lipschitz",
        "R" => "diameter",
        "r" => "radius",
        _ => "eps",
    }
}

/// `a` solving `a^2 lambda = A + a`.
pub fn step_weight(lambda: f64, a_big: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * lambda * a_big).sqrt()) / (2.0 * lambda)
}

/// `(A x + a v) / (A + a)`
fn momentum_point(x: &[f64], v: &[f64], a_big: f64, a: f64) -> Vec<f64> {
    let t = a_big + a;
    x.iter().zip(v).map(|(xi, vi)| (a_big * xi + a * vi) / t).collect()
}

/// Counts invocations of a wrapped oracle.
struct Metered<'b> {
    inner: &'b dyn Broo,
    calls: Cell<u64>,
}

impl Broo for Metered<'_> {
    fn problem(&self) -> &Problem {
        self.inner.problem()
    }

    fn radius(&self) -> f64 {
        self.inner.radius()
    }

    fn solve(&self, req: &BrooRequest, rng: &mut Rng) -> Result<BrooResult> {
        self.calls.set(self.calls.get() + 1);
        self.inner.solve(req, rng)
    }

    fn objective(&self, x: &[f64]) -> Result<f64> {
        self.inner.objective(x)
    }

    fn name(&self) -> &'static str {
        self.inner.name()
    }
}

/// Number of independent copies a high-probability call with failure probability `p` runs.
pub fn high_prob_copies(p: f64) -> u32 {
    (1.0 / p).log2().ceil().max(1.0) as u32
}

/// Runs `ceil(log2(1/p))` copies at accuracy `delta / sqrt(2)` and keeps the one with the
/// smallest exact regularized objective. A single copy is returned without evaluation.
pub fn high_prob_broo(broo: &dyn Broo, req: &BrooRequest, p: f64, rng: &mut Rng) -> Result<BrooResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid("failure_prob", "must lie in (0, 1)"));
    }
    let copies = high_prob_copies(p);
    let sub = BrooRequest { delta: req.delta / 2f64.sqrt(), ..req.clone() };
    let start = broo.problem().ensemble.counts();
    let mut best: Option<(f64, BrooResult)> = None;
    let mut iterations = 0;
    for _ in 0..copies {
        let res = broo.solve(&sub, rng)?;
        iterations += res.iterations;
        if copies == 1 {
            best = Some((0.0, res));
            break;
        }
        let val = broo.objective(&res.x)? + req.prox_term(&res.x);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, res));
        }
    }
    let (_, mut res) = best.expect("at least one copy");
    res.iterations = iterations;
    res.evals = broo.problem().ensemble.counts().since(start);
    Ok(res)
}

/// Level sizes of the Moreau-gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSchedule {
    pub g: f64,
    pub lambda: f64,
    /// `2 G^2 / (lambda^2 min(beta^2, sigma^2 / 2))`
    pub t_max: f64,
    /// `t0_factor G^2 log(T_max) / sigma^2`
    pub t0: f64,
}

impl LevelSchedule {
    pub fn new(g: f64, lambda: f64, beta: f64, sigma_sq: f64, t0_factor: f64) -> Self {
        let t_max = 2.0 * g * g / (lambda * lambda * beta.powi(2).min(0.5 * sigma_sq));
        let t0 = t0_factor * g * g * t_max.ln().max(1.0) / sigma_sq;
        Self { g, lambda, t_max, t0 }
    }

    /// Oracle accuracy at `level`: `G / (lambda sqrt(2^level T_0))`.
    pub fn delta(&self, level: u32) -> f64 {
        self.g / (self.lambda * (2f64.powi(level as i32) * self.t0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorGradEstimate {
    pub g: Vec<f64>,
    /// Sampled level `J >= 1`.
    pub level: u32,
    /// Whether the level fell below `T_max` and the correction term was used.
    pub corrected: bool,
}

/// Debiased estimate of the Moreau-envelope gradient `lambda (y - prox_lambda(y))`:
/// one oracle call at the base accuracy plus a randomized-level telescoping correction.
pub fn mor_grad_est(
    broo: &dyn Broo,
    y: &[f64],
    lambda: f64,
    beta: f64,
    sigma_sq: f64,
    t0_factor: f64,
    rng: &mut Rng,
) -> Result<MorGradEstimate> {
    if !(beta > 0.0) || !(sigma_sq > 0.0) {
        return Err(invalid("beta", "bias and variance targets must be positive"));
    }
    let g = broo.problem().lipschitz();
    let r = broo.radius();
    let sched = LevelSchedule::new(g, lambda, beta, sigma_sq, t0_factor);
    let t_max = sched.t_max;
    let delta = |level: u32| sched.delta(level);
    let call = |level: u32, rng: &mut Rng| {
        broo.solve(&BrooRequest::new(y.to_vec(), r, lambda, delta(level)), rng).map(|res| res.x)
    };
    let x0 = call(0, rng)?;
    let level = 1 + GeometricLevelSampler::new(0.5, None)?.sample(rng);
    let weight = 2f64.powi(level.min(1023) as i32);
    let corrected = weight <= t_max;
    let x_hat = if corrected {
        let fine = call(level, rng)?;
        let coarse = call(level - 1, rng)?;
        x0.iter().zip(fine.iter().zip(&coarse)).map(|(a, (f, c))| a + weight * (f - c)).collect()
    } else {
        x0
    };
    let g_hat = y.iter().zip(&x_hat).map(|(yi, xi)| lambda * (yi - xi)).collect();
    Ok(MorGradEstimate { g: g_hat, level, corrected })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bisection {
    pub lambda: f64,
    pub probes: u32,
    /// The probe budget ran out without an accepted value and `lambda_m` was returned.
    pub fallback: bool,
}

/// Chooses the next regularization. `lambda_m` is accepted when its proximal point stays
/// within `accept_high * r`; otherwise a geometric bisection on `[lambda_m, lambda_max]`
/// looks for a distance in `[accept_low * r, accept_high * r]`, using at most `m_eps` probes.
pub fn lambda_bisection(
    broo: &dyn Broo,
    x: &[f64],
    v: &[f64],
    a_big: f64,
    params: &AccelParams,
    rng: &mut Rng,
) -> Result<Bisection> {
    let c = &params.consts;
    let (low, high) = (c.accept_low * params.r, c.accept_high * params.r);
    let lambda_m = params.lambda_m;
    // A G-Lipschitz objective moves its proximal point at most G / lambda.
    if params.g / lambda_m <= high {
        return Ok(Bisection { lambda: lambda_m, probes: 0, fallback: false });
    }
    let probe = |lambda: f64, rng: &mut Rng| -> Result<f64> {
        let a = step_weight(lambda, a_big);
        let y = momentum_point(x, v, a_big, a);
        let req = BrooRequest::new(y.clone(), params.r, lambda, params.probe_delta());
        let res = high_prob_broo(broo, &req, params.failure_prob, rng)?;
        Ok(dist(&res.x, &y))
    };
    let mut probes = 1u32;
    if probe(lambda_m, rng)? <= high {
        return Ok(Bisection { lambda: lambda_m, probes: 1, fallback: false });
    }
    let (mut lo, mut hi) = (lambda_m, params.lambda_max());
    while probes < params.m_eps.max(2) && hi > lo {
        let mid = (lo * hi).sqrt();
        probes += 1;
        let d = probe(mid, rng)?;
        if d > high {
            lo = mid;
        } else if d < low {
            hi = mid;
        } else {
            return Ok(Bisection { lambda: mid, probes, fallback: false });
        }
    }
    log::warn!("lambda bisection used {probes} probes on [{lo:.3e}, {hi:.3e}] without acceptance; using lambda_m");
    Ok(Bisection { lambda: lambda_m, probes, fallback: true })
}

/// Iterate state after an outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelState {
    pub k: u64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub a_big: f64,
    pub a: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterResult {
    pub x: Vec<f64>,
    pub iterations: u64,
    /// Proximal steps `x_{k+1} = O(y_k)`, one per iteration.
    pub prox_calls: u64,
    /// Every oracle invocation, including bisection probes and gradient estimation.
    pub oracle_calls: u64,
    pub bisection_probes: u64,
    pub bisection_fallbacks: u64,
    pub a_big: f64,
    pub evals: Counts,
}

/// Runs the accelerated outer loop from `x0` until `A >= A_max` or `K_max` steps.
/// `observer` sees the state and the cumulative evaluation counts after each step.
pub fn outer_solve(
    broo: &dyn Broo,
    params: &AccelParams,
    x0: &[f64],
    rng: &mut Rng,
    mut observer: impl FnMut(&AccelState, Counts),
) -> Result<OuterResult> {
    let problem = broo.problem();
    if (broo.radius() - params.r).abs() > 1e-12 * params.r {
        return Err(invalid("radius", "parameters and oracle disagree on the ball radius"));
    }
    problem.ensemble.check_point(x0)?;
    let metered = Metered { inner: broo, calls: Cell::new(0) };
    let start = problem.ensemble.counts();
    let mut state = AccelState {
        k: 0,
        x: x0.to_vec(),
        v: x0.to_vec(),
        a_big: params.a0,
        a: 0.0,
        lambda: params.lambda_m,
    };
    let (mut probes, mut fallbacks) = (0u64, 0u64);
    loop {
        let bis = lambda_bisection(&metered, &state.x, &state.v, state.a_big, params, rng)?;
        probes += bis.probes as u64;
        fallbacks += bis.fallback as u64;
        let lambda = bis.lambda;
        let a = step_weight(lambda, state.a_big);
        let y = momentum_point(&state.x, &state.v, state.a_big, a);
        let req = BrooRequest::new(y.clone(), params.r, lambda, params.outer_delta());
        let x_next = metered.solve(&req, rng)?.x;
        let est = mor_grad_est(
            &metered,
            &y,
            lambda,
            params.beta,
            params.sigma_sq(lambda),
            params.consts.t0_factor,
            rng,
        )?;
        let stepped: Vec<f64> = state.v.iter().zip(&est.g).map(|(vi, gi)| vi - 0.5 * a * gi).collect();
        state.v = problem.domain().project(&stepped);
        state.x = x_next;
        state.a_big += a;
        state.a = a;
        state.lambda = lambda;
        state.k += 1;
        observer(&state, problem.ensemble.counts().since(start));
        if state.a_big >= params.a_max || state.k >= params.k_max {
            break;
        }
    }
    Ok(OuterResult {
        x: state.x,
        iterations: state.k,
        prox_calls: state.k,
        oracle_calls: metered.calls.get(),
        bisection_probes: probes,
        bisection_fallbacks: fallbacks,
        a_big: state.a_big,
        evals: problem.ensemble.counts().since(start),
    })
}
