//! Ball oracles for the entropy-regularized f-divergence objective, working on the joint
//! dual `Upsilon(x, y) + lambda/2 |x - c|^2` with `y` confined to `[ybar - r, ybar + r]`.

use crate::broo::{center_suffices, loopless_katyusha, Broo, BrooRequest, BrooResult, KatyushaParams, VrObjective};
use crate::error::{DroError, Result};
use crate::estimators::{DualBall, DualRef};
use crate::problem::{Counts, Problem};
use crate::rng::Rng;

fn require_fdiv(problem: &Problem) -> Result<()> {
    if problem.divergence().is_none() {
        return Err(DroError::Config("dual oracles need an f-divergence problem".into()));
    }
    Ok(())
}

/// Exact `argmin_y Upsilon(x, y)` kept inside the dual interval of the ball.
fn exact_y(ctx: &DualBall<'_>, x: &[f64], radius: f64) -> Result<f64> {
    let losses = ctx.problem.ensemble.values(x)?;
    let y = ctx.conj.solve_y_star(&losses, ctx.g)?;
    Ok(y.clamp(ctx.ybar - radius, ctx.ybar + radius))
}

/// The center with its exact dual scalar.
fn center_result(problem: &Problem, req: &BrooRequest, start: Counts) -> Result<BrooResult> {
    let losses = problem.ensemble.values(&req.center)?;
    let conj = problem.conjugate().expect("f-divergence problem");
    let ybar = conj.solve_y_star(&losses, problem.lipschitz())?;
    Ok(BrooResult { x: req.center.clone(), y: Some(ybar), iterations: 0, evals: problem.ensemble.counts().since(start) })
}

/// Epoch-doubling SGD on the joint dual with importance-sampled gradients; the dual scalar
/// is reset to its exact minimizer once epochs are long enough. Works for non-smooth losses.
#[derive(Debug, Clone)]
pub struct DualEpochSgd<'a> {
    problem: &'a Problem,
    pub budget_factor: f64,
    pub first_epoch: u64,
    pub step_divisor: f64,
}

impl<'a> DualEpochSgd<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        require_fdiv(problem)?;
        Ok(Self { problem, budget_factor: 8.0, first_epoch: 128, step_divisor: 16.0 })
    }

    /// Epoch length beyond which the dual scalar is recomputed exactly: `G^4 / (lambda eps')^2`.
    pub fn exact_y_threshold(&self, lambda: f64) -> f64 {
        let g = self.problem.lipschitz();
        g.powi(4) / (lambda * self.problem.eps_prime()).powi(2)
    }

    pub fn epochs(&self, req: &BrooRequest) -> u32 {
        let g = self.problem.lipschitz();
        let t = self.budget_factor * g * g / (req.lambda * req.delta).powi(2);
        (t / self.first_epoch as f64 + 1.0).log2().ceil().max(1.0) as u32
    }
}

impl Broo for DualEpochSgd<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn name(&self) -> &'static str {
        "dual-epoch-sgd"
    }

    fn solve(&self, req: &BrooRequest, rng: &mut Rng) -> Result<BrooResult> {
        req.validate(self.problem)?;
        if req.delta >= req.radius / 2.0 {
            return Err(DroError::Precondition(format!(
                "dual epoch-SGD needs delta < r/2, got delta = {} with r = {}",
                req.delta, req.radius
            )));
        }
        let start = self.problem.ensemble.counts();
        if center_suffices(self.problem, req) {
            return center_result(self.problem, req, start);
        }
        let ctx = DualBall::build(self.problem, &req.center, req.lambda)?;
        let r = req.radius;
        let (lo, hi) = (ctx.ybar - r, ctx.ybar + r);
        let threshold = self.exact_y_threshold(req.lambda);
        let mut x = req.center.clone();
        let mut y = ctx.ybar;
        let mut len = self.first_epoch;
        let mut gamma = 1.0 / (self.step_divisor * req.lambda);
        let mut steps = 0u64;
        for _ in 0..self.epochs(req) {
            let mut ax = vec![0.0; x.len()];
            let mut ay = 0.0;
            for _ in 0..len {
                let (gx, gy) = ctx.grad_estimate(&x, y, rng)?;
                let denom = 1.0 + gamma * req.lambda;
                let step: Vec<f64> = (0..x.len())
                    .map(|k| (x[k] - gamma * gx[k] + gamma * req.lambda * req.center[k]) / denom)
                    .collect();
                x = req.project(self.problem, &step);
                y = (y - gamma * gy).clamp(lo, hi);
                for (a, v) in ax.iter_mut().zip(&x) {
                    *a += v;
                }
                ay += y;
            }
            steps += len;
            x = ax.into_iter().map(|v| v / len as f64).collect();
            y = ay / len as f64;
            len *= 2;
            gamma /= 2.0;
            if len as f64 >= threshold {
                y = exact_y(&ctx, &x, r)?;
            }
        }
        Ok(BrooResult {
            x,
            y: Some(y),
            iterations: steps,
            evals: self.problem.ensemble.counts().since(start),
        })
    }
}

/// Restarted loopless Katyusha on the joint dual; after every restart the dual scalar is
/// replaced by its exact minimizer. Needs smooth losses.
#[derive(Debug, Clone)]
pub struct RestartedVr<'a> {
    problem: &'a Problem,
    pub inner_factor: f64,
    pub smoothness_factor: f64,
}

impl<'a> RestartedVr<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        require_fdiv(problem)?;
        if !problem.constants().smoothness.is_finite() {
            return Err(DroError::NotSmooth);
        }
        Ok(Self { problem, inner_factor: 1.0, smoothness_factor: 1.0 })
    }

    fn effective_smoothness(&self, lambda: f64) -> f64 {
        let c = self.problem.constants();
        self.smoothness_factor * (c.smoothness + lambda + c.lipschitz.powi(2) / self.problem.eps_prime())
    }

    /// Number of restarts `ceil(log2(2 G r / (lambda delta^2)))`, possibly nonpositive.
    pub fn restarts(&self, req: &BrooRequest) -> i64 {
        let g = self.problem.lipschitz();
        (2.0 * g * req.radius / (req.lambda * req.delta * req.delta)).log2().ceil() as i64
    }

    pub fn inner_steps(&self, lambda: f64) -> u64 {
        let n = self.problem.n() as f64;
        let l = self.effective_smoothness(lambda);
        (self.inner_factor * (n + (n * l / lambda).sqrt())).ceil().max(1.0) as u64
    }

    /// One inner run from `(x0, y0)`. With fewer steps than losses, the better of the start
    /// and the result by exact objective is kept.
    pub fn accelerated_vr_inner(
        &self,
        ctx: &DualBall<'_>,
        req: &BrooRequest,
        x0: &[f64],
        y0: f64,
        steps: u64,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let obj = JointObjective { ctx, req };
        let mut z0 = x0.to_vec();
        z0.push(y0);
        let params = KatyushaParams {
            n: self.problem.n(),
            smoothness: self.effective_smoothness(req.lambda),
            strong_convexity: req.lambda,
        };
        let mut z = loopless_katyusha(&obj, &z0, steps, params, rng)?;
        if (steps as usize) < self.problem.n() {
            let before = ctx.reference(x0, y0)?.value;
            let y = z.pop().expect("joint variable");
            let after = ctx.reference(&z, y)?.value;
            return Ok(if after <= before { (z, y) } else { (x0.to_vec(), y0) });
        }
        let y = z.pop().expect("joint variable");
        Ok((z, y))
    }
}

struct JointObjective<'c, 'a> {
    ctx: &'c DualBall<'a>,
    req: &'c BrooRequest,
}

impl VrObjective for JointObjective<'_, '_> {
    type Snapshot = DualRef;

    fn snapshot(&self, w: &[f64]) -> Result<DualRef> {
        let (x, y) = w.split_at(w.len() - 1);
        self.ctx.reference(x, y[0])
    }

    fn estimate(&self, w: &[f64], s: &DualRef, rng: &mut Rng) -> Result<Vec<f64>> {
        let (x, y) = w.split_at(w.len() - 1);
        let i = self.ctx.pbar.sample(rng);
        let (mut gx, gy) = self.ctx.svrg_estimate(x, y[0], s, i)?;
        gx.push(gy);
        Ok(gx)
    }

    fn project(&self, w: &[f64]) -> Vec<f64> {
        let (x, y) = w.split_at(w.len() - 1);
        let r = self.req.radius;
        let mut out = self.req.project(self.ctx.problem, x);
        out.push(y[0].clamp(self.ctx.ybar - r, self.ctx.ybar + r));
        out
    }
}

impl Broo for RestartedVr<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn name(&self) -> &'static str {
        "restarted-vr"
    }

    fn solve(&self, req: &BrooRequest, rng: &mut Rng) -> Result<BrooResult> {
        req.validate(self.problem)?;
        let start = self.problem.ensemble.counts();
        let restarts = self.restarts(req);
        if restarts <= 0 || center_suffices(self.problem, req) {
            return center_result(self.problem, req, start);
        }
        let ctx = DualBall::build(self.problem, &req.center, req.lambda)?;
        let steps = self.inner_steps(req.lambda);
        let mut x = req.center.clone();
        let mut y = ctx.ybar;
        for _ in 0..restarts {
            let (xn, _) = self.accelerated_vr_inner(&ctx, req, &x, y, steps, rng)?;
            x = xn;
            y = exact_y(&ctx, &x, req.radius)?;
        }
        Ok(BrooResult {
            x,
            y: Some(y),
            iterations: restarts as u64 * steps,
            evals: self.problem.ensemble.counts().since(start),
        })
    }
}
