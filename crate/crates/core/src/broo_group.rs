//! Ball oracles for the group softmax objective.

use crate::broo::{center_suffices, loopless_katyusha, Broo, BrooRequest, BrooResult, KatyushaParams, VrObjective};
use crate::error::{DroError, Result};
use crate::estimators::{GroupBall, GroupRef};
use crate::linalg::axpy;
use crate::problem::Problem;
use crate::rng::Rng;

/// Epoch-doubling projected SGD on the exponentiated softmax with the multilevel gradient
/// estimator. Works for non-smooth losses.
#[derive(Debug, Clone)]
pub struct EpochSgdGroup<'a> {
    problem: &'a Problem,
    /// Total stochastic steps are at least `budget_factor * G^2 / (lambda delta)^2`.
    pub budget_factor: f64,
    pub first_epoch: u64,
    /// First-epoch step size is `1 / (step_divisor * lambda)`.
    pub step_divisor: f64,
}

impl<'a> EpochSgdGroup<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        if problem.groups().is_none() {
            return Err(DroError::Config("epoch-SGD group oracle needs a group problem".into()));
        }
        Ok(Self { problem, budget_factor: 8.0, first_epoch: 128, step_divisor: 16.0 })
    }

    /// Number of epochs and the stochastic step budget for a request.
    pub fn schedule(&self, req: &BrooRequest) -> (u32, f64) {
        let g = self.problem.lipschitz();
        let t = self.budget_factor * g * g / (req.lambda * req.delta).powi(2);
        let epochs = (t / self.first_epoch as f64 + 1.0).log2().ceil().max(1.0) as u32;
        (epochs, t)
    }
}

impl Broo for EpochSgdGroup<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn name(&self) -> &'static str {
        "epoch-sgd-group"
    }

    fn solve(&self, req: &BrooRequest, rng: &mut Rng) -> Result<BrooResult> {
        req.validate(self.problem)?;
        let start = self.problem.ensemble.counts();
        if center_suffices(self.problem, req) {
            return Ok(BrooResult { x: req.center.clone(), y: None, iterations: 0, evals: Default::default() });
        }
        let ctx = GroupBall::build(self.problem, &req.center, req.lambda)?;
        let (epochs, _) = self.schedule(req);
        let mut x = req.center.clone();
        let mut steps = 0u64;
        let mut len = self.first_epoch;
        let mut gamma = 1.0 / (self.step_divisor * req.lambda);
        for _ in 0..epochs {
            let mut avg = vec![0.0; x.len()];
            for _ in 0..len {
                let g = ctx.grad_estimate(&x, rng)?;
                axpy(-gamma, &g, &mut x);
                x = req.project(self.problem, &x);
                axpy(1.0, &x, &mut avg);
            }
            steps += len;
            x = avg.iter().map(|v| v / len as f64).collect();
            len *= 2;
            gamma /= 2.0;
        }
        Ok(BrooResult {
            x,
            y: None,
            iterations: steps,
            evals: self.problem.ensemble.counts().since(start),
        })
    }
}

/// Restarted loopless Katyusha on the exponentiated softmax with the variance-reduced
/// estimator. Needs smooth losses.
#[derive(Debug, Clone)]
pub struct KatyushaGroup<'a> {
    problem: &'a Problem,
    /// Steps per restart are `inner_factor * (N + sqrt(N L_eff / lambda))`.
    pub inner_factor: f64,
    /// Multiplies `L + lambda + G^2/eps'` to give the step-size smoothness.
    pub smoothness_factor: f64,
}

impl<'a> KatyushaGroup<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        if problem.groups().is_none() {
            return Err(DroError::Config("variance-reduced group oracle needs a group problem".into()));
        }
        if !problem.constants().smoothness.is_finite() {
            return Err(DroError::NotSmooth);
        }
        Ok(Self { problem, inner_factor: 1.0, smoothness_factor: 1.0 })
    }

    fn effective_smoothness(&self, lambda: f64) -> f64 {
        let c = self.problem.constants();
        let g = c.lipschitz;
        self.smoothness_factor * (c.smoothness + lambda + g * g / self.problem.eps_prime())
    }

    /// `(restarts, steps per restart)` for a request.
    pub fn schedule(&self, req: &BrooRequest) -> (u32, u64) {
        let n = self.problem.n() as f64;
        let l = self.effective_smoothness(req.lambda);
        let g = self.problem.lipschitz();
        let restarts = (g * req.radius / (req.lambda * req.delta * req.delta)).log2().ceil().max(1.0) as u32;
        let steps = (self.inner_factor * (n + (n * l / req.lambda).sqrt())).ceil() as u64;
        (restarts, steps.max(1))
    }
}

struct GammaObjective<'c, 'a> {
    ctx: &'c GroupBall<'a>,
    req: &'c BrooRequest,
}

impl VrObjective for GammaObjective<'_, '_> {
    type Snapshot = GroupRef;

    fn snapshot(&self, w: &[f64]) -> Result<GroupRef> {
        self.ctx.reference(w)
    }

    fn estimate(&self, x: &[f64], s: &GroupRef, rng: &mut Rng) -> Result<Vec<f64>> {
        self.ctx.svrg_estimate(x, s, rng)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        self.req.project(self.ctx.problem, x)
    }
}

impl Broo for KatyushaGroup<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn name(&self) -> &'static str {
        "katyusha-group"
    }

    fn solve(&self, req: &BrooRequest, rng: &mut Rng) -> Result<BrooResult> {
        req.validate(self.problem)?;
        let start = self.problem.ensemble.counts();
        if center_suffices(self.problem, req) {
            return Ok(BrooResult { x: req.center.clone(), y: None, iterations: 0, evals: Default::default() });
        }
        let ctx = GroupBall::build(self.problem, &req.center, req.lambda)?;
        let obj = GammaObjective { ctx: &ctx, req };
        let (restarts, steps) = self.schedule(req);
        let params = KatyushaParams {
            n: self.problem.n(),
            smoothness: self.effective_smoothness(req.lambda),
            strong_convexity: req.lambda,
        };
        let mut x = req.center.clone();
        for _ in 0..restarts {
            x = loopless_katyusha(&obj, &x, steps, params, rng)?;
        }
        Ok(BrooResult {
            x,
            y: None,
            iterations: restarts as u64 * steps,
            evals: self.problem.ensemble.counts().since(start),
        })
    }
}
