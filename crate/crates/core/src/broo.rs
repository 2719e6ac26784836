//! The ball regularized optimization oracle interface and the shared variance-reduced inner loop.
//!
//! A ball oracle of radius `r` for an objective `F` answers a query `(c, lambda, delta)` with a
//! point `x` in `B_r(c) ∩ X` such that
//! `E[F(x) + lambda/2 |x - c|^2] <= min_{B_r(c) ∩ X} {F + lambda/2 |. - c|^2} + lambda delta^2 / 2`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DroError, Result};
use crate::linalg::{dist_sq, project_two_balls, Ball};
use crate::problem::{Counts, Problem};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrooRequest {
    pub center: Vec<f64>,
    pub radius: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl BrooRequest {
    pub fn new(center: Vec<f64>, radius: f64, lambda: f64, delta: f64) -> Self {
        Self { center, radius, lambda, delta }
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda", "must be positive and finite"));
        }
        if !(self.delta > 0.0) {
            return Err(invalid("delta", "must be positive"));
        }
        if !(self.radius > 0.0) || self.radius > problem.r_eps() * (1.0 + 1e-9) {
            return Err(invalid("radius", format!("must lie in (0, {}]", problem.r_eps())));
        }
        if self.center.len() != problem.dim() {
            return Err(DroError::DimensionMismatch { expected: problem.dim(), got: self.center.len() });
        }
        if !problem.domain().contains(&self.center) {
            return Err(DroError::Precondition("ball center outside the domain".into()));
        }
        Ok(())
    }

    pub fn ball(&self) -> Ball {
        Ball::new(self.center.clone(), self.radius)
    }

    /// Euclidean projection onto `B_r(c) ∩ X`.
    pub fn project(&self, problem: &Problem, x: &[f64]) -> Vec<f64> {
        project_two_balls(x, &self.ball(), problem.domain())
    }

    /// `lambda/2 |x - c|^2`
    pub fn prox_term(&self, x: &[f64]) -> f64 {
        0.5 * self.lambda * dist_sq(x, &self.center)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrooResult {
    pub x: Vec<f64>,
    /// Dual scalar accompanying `x` for f-divergence oracles.
    pub y: Option<f64>,
    pub iterations: u64,
    pub evals: Counts,
}

/// A ball regularized optimization oracle.
pub trait Broo {
    fn problem(&self) -> &Problem;

    /// Largest admissible ball radius.
    fn radius(&self) -> f64 {
        self.problem().r_eps()
    }

    fn solve(&self, req: &BrooRequest, rng: &mut Rng) -> Result<BrooResult>;

    /// The objective `F` this oracle regularizes, evaluated exactly with one metered pass.
    fn objective(&self, x: &[f64]) -> Result<f64> {
        self.problem().smoothed_objective(x)
    }

    fn name(&self) -> &'static str;
}

/// Whether returning the center already meets the contract. For a `G`-Lipschitz objective
/// the center is at most `max_{t <= r} (G t - lambda t^2 / 2)` above the regularized minimum.
pub(crate) fn center_suffices(problem: &Problem, req: &BrooRequest) -> bool {
    let (g, r, l) = (problem.lipschitz(), req.radius, req.lambda);
    let gap = if g <= l * r { g * g / (2.0 * l) } else { g * r - 0.5 * l * r * r };
    0.5 * l * req.delta * req.delta >= gap
}

/// A smooth strongly convex objective over a convex set with a variance-reduced estimator
/// built around snapshot points.
pub(crate) trait VrObjective {
    type Snapshot;

    /// Exact gradient data at `w` (one full pass).
    fn snapshot(&self, w: &[f64]) -> Result<Self::Snapshot>;

    fn estimate(&self, x: &[f64], s: &Self::Snapshot, rng: &mut Rng) -> Result<Vec<f64>>;

    fn project(&self, x: &[f64]) -> Vec<f64>;
}

/// Step parameters of the loopless Katyusha iteration.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KatyushaParams {
    /// Number of components; snapshots refresh with probability `1/n`.
    pub n: usize,
    pub smoothness: f64,
    pub strong_convexity: f64,
}

/// Loopless Katyusha with projections: `iters` stochastic steps from `x0`.
pub(crate) fn loopless_katyusha<O: VrObjective>(
    obj: &O,
    x0: &[f64],
    iters: u64,
    p: KatyushaParams,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = p.n.max(1) as f64;
    let sigma = (p.strong_convexity / p.smoothness).min(1.0);
    let theta1 = (2.0 * sigma * n / 3.0).sqrt().min(0.5);
    let theta2 = 0.5;
    let eta = theta2 / ((1.0 + theta2) * theta1);
    let step = eta / p.smoothness;
    let mut y = x0.to_vec();
    let mut z = x0.to_vec();
    let mut w = x0.to_vec();
    let mut snap = obj.snapshot(&w)?;
    let d = x0.len();
    let mut x = vec![0.0; d];
    for _ in 0..iters {
        for k in 0..d {
            x[k] = theta1 * z[k] + theta2 * w[k] + (1.0 - theta1 - theta2) * y[k];
        }
        let g = obj.estimate(&x, &snap, rng)?;
        let mut zn: Vec<f64> = (0..d)
            .map(|k| (eta * sigma * x[k] + z[k] - step * g[k]) / (1.0 + eta * sigma))
            .collect();
        zn = obj.project(&zn);
        let y_prev = std::mem::replace(
            &mut y,
            (0..d).map(|k| x[k] + theta1 * (zn[k] - z[k])).collect(),
        );
        z = zn;
        if rng.random::<f64>() < 1.0 / n {
            w = y_prev;
            snap = obj.snapshot(&w)?;
        }
    }
    Ok(y)
}
