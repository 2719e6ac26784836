//! Stochastic gradient estimators used inside the ball oracles.
//!
//! Group problems minimize, over a ball of radius `r = eps'/G` around a center `c`, the
//! exponentiated softmax
//!
//! ```text
//! Gamma(x) = sum_i pbar_i * eps' * exp((L_i(x) - L_i(c) + lambda/2 |x - c|^2) / eps')
//! ```
//!
//! with `pbar = softmax(L(c) / eps')`. It is a monotone transform of the regularized
//! softmax objective, so both share their ball-constrained minimizer, but unlike the softmax
//! it is linear in the sampling distribution and so admits unbiased gradients. The inner
//! exponential of a group average is debiased with a randomized multilevel estimator.
//!
//! f-divergence problems work on the joint dual objective
//! `Upsilon(x, y) = sum_i psi_eps*(l_i(x) - G y) + G y`, importance-sampled from the weights
//! at the ball center.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Geometric;

use crate::divergence::RegularizedConjugate;
use crate::error::{DroError, Result};
use crate::linalg::{axpy, dist, dist_sq, log_sum_exp};
use crate::problem::{GroupWeights, Problem};
use crate::rng::Rng;

/// Relative slack on the `e^2` importance-ratio bound before it is treated as a broken precondition.
const RATIO_SLACK: f64 = 1e-6;

/// Levels `J` with `P(J = j) = s (1 - s)^j`, optionally truncated at `max_level`.
#[derive(Debug, Clone)]
pub struct GeometricLevelSampler {
    success_prob: f64,
    max_level: Option<u32>,
    dist: Geometric,
}

impl GeometricLevelSampler {
    pub fn new(success_prob: f64, max_level: Option<u32>) -> Result<Self> {
        let dist = Geometric::new(success_prob)
            .map_err(|e| crate::error::invalid("success_prob", e.to_string()))?;
        Ok(Self { success_prob, max_level, dist })
    }

    /// Level law of the multilevel estimator: success probability `1 - 1/sqrt(8)`.
    pub fn mlmc() -> Self {
        Self::new(1.0 - 8f64.sqrt().recip(), None).expect("valid probability")
    }

    pub fn success_prob(&self) -> f64 {
        self.success_prob
    }

    pub fn sample(&self, rng: &mut Rng) -> u32 {
        loop {
            let j = self.dist.sample(rng).min(u32::MAX as u64) as u32;
            match self.max_level {
                Some(m) if j > m => continue,
                _ => return j,
            }
        }
    }

    /// `P(J = j)` for this (possibly truncated) law.
    pub fn pmf(&self, j: u32) -> f64 {
        let q = 1.0 - self.success_prob;
        let p = self.success_prob * q.powi(j as i32);
        match self.max_level {
            Some(m) if j > m => 0.0,
            Some(m) => p / (1.0 - q.powi(m as i32 + 1)),
            None => p,
        }
    }
}

/// A finite distribution with stored log-probabilities and a prefix-sum sampler.
#[derive(Debug, Clone)]
pub struct SamplingDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl SamplingDistribution {
    /// Normalizes `exp(log_weights)`.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let z = log_sum_exp(log_weights);
        if !z.is_finite() {
            return Err(DroError::PmfInconsistent { sum: z.exp() });
        }
        let log_probs: Vec<f64> = log_weights.iter().map(|w| w - z).collect();
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let sampler = WeightedIndex::new(&probs)
            .map_err(|_| DroError::PmfInconsistent { sum: probs.iter().sum() })?;
        Ok(Self { probs, log_probs, sampler })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.log_probs[i]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        self.sampler.sample(rng)
    }
}

fn check_in_ball(x: &[f64], center: &[f64], radius: f64, what: &str) -> Result<()> {
    let d = dist(x, center);
    if d > radius * (1.0 + 1e-9) + 1e-14 {
        return Err(DroError::Precondition(format!(
            "{what} lies {d} from the ball center, beyond radius {radius}"
        )));
    }
    Ok(())
}

/// Per-call cache of loss differences `l_j(x) - l_j(x_ref)`, so repeated member draws are free.
struct DiffCache<'a> {
    problem: &'a Problem,
    x: &'a [f64],
    reference: &'a [f64],
    small: Vec<(usize, f64)>,
    large: Option<HashMap<usize, f64>>,
}

impl<'a> DiffCache<'a> {
    fn new(problem: &'a Problem, x: &'a [f64], reference: &'a [f64]) -> Self {
        Self { problem, x, reference, small: Vec::new(), large: None }
    }

    fn get(&mut self, j: usize) -> Result<f64> {
        if let Some(map) = &self.large {
            if let Some(&v) = map.get(&j) {
                return Ok(v);
            }
        } else if let Some(&(_, v)) = self.small.iter().find(|e| e.0 == j) {
            return Ok(v);
        }
        let v = self.problem.ensemble.value(j, self.x)? - self.reference[j];
        match &mut self.large {
            Some(map) => {
                map.insert(j, v);
            }
            None => {
                self.small.push((j, v));
                if self.small.len() > 16 {
                    self.large = Some(self.small.drain(..).collect());
                }
            }
        }
        Ok(v)
    }
}

/// Ball data for group problems: center, radius, smoothing, regularization and the
/// center-weighted group distribution `pbar`.
#[derive(Debug, Clone)]
pub struct GroupBall<'a> {
    pub problem: &'a Problem,
    pub groups: &'a GroupWeights,
    pub center: Vec<f64>,
    pub radius: f64,
    pub eps_prime: f64,
    pub lambda: f64,
    /// `l_j(center)` for every loss.
    pub center_losses: Vec<f64>,
    /// `L_i(center)` for every group.
    pub center_groups: Vec<f64>,
    pub pbar: SamplingDistribution,
    levels: GeometricLevelSampler,
}

impl<'a> GroupBall<'a> {
    /// Builds `pbar` from one full pass of loss values at `center`.
    pub fn build(problem: &'a Problem, center: &[f64], lambda: f64) -> Result<Self> {
        let groups = problem
            .groups()
            .ok_or_else(|| DroError::Config("group estimators need a group problem".into()))?;
        let eps_prime = problem.eps_prime();
        let center_losses = problem.ensemble.values(center)?;
        let center_groups = groups.combine(&center_losses);
        let scaled: Vec<f64> = center_groups.iter().map(|v| v / eps_prime).collect();
        Ok(Self {
            problem,
            groups,
            center: center.to_vec(),
            radius: problem.r_eps(),
            eps_prime,
            lambda,
            center_losses,
            center_groups,
            pbar: SamplingDistribution::from_log_weights(&scaled)?,
            levels: GeometricLevelSampler::mlmc(),
        })
    }

    fn shift(&self, x: &[f64]) -> f64 {
        0.5 * self.lambda * dist_sq(x, &self.center)
    }

    /// Unbiased estimate of `eps' exp((L_i(x) - L_i(x_ref) + lambda/2 |x - c|^2) / eps')`,
    /// given all loss values `ref_losses` at `x_ref`.
    pub fn mlmc_gamma(&self, x: &[f64], ref_losses: &[f64], i: usize, rng: &mut Rng) -> Result<f64> {
        check_in_ball(x, &self.center, self.radius, "MLMC query point")?;
        let ep = self.eps_prime;
        let shift = self.shift(x);
        let gamma_of = |mean: f64| ep * ((mean + shift) / ep).exp();
        let row = self.groups.row(i);
        if row.len() == 1 {
            let j = row[0].0;
            let d = self.problem.ensemble.value(j, x)? - ref_losses[j];
            return Ok(gamma_of(d));
        }
        let level = self.levels.sample(rng);
        let mut cache = DiffCache::new(self.problem, x, ref_losses);
        let first = cache.get(self.groups.sample_member(i, rng))?;
        let base = gamma_of(first);
        if level == 0 {
            return Ok(base);
        }
        let n = 1usize << level.min(62);
        let half = n / 2;
        let (mut s_lo, mut s_hi) = (first, 0.0);
        for k in 1..n {
            let d = cache.get(self.groups.sample_member(i, rng))?;
            if k < half {
                s_lo += d;
            } else {
                s_hi += d;
            }
        }
        let h = half as f64;
        let full = gamma_of((s_lo + s_hi) / n as f64);
        let halves = 0.5 * (gamma_of(s_lo / h) + gamma_of(s_hi / h));
        Ok(base + (full - halves) / self.levels.pmf(level))
    }

    /// Unbiased estimate of the gradient of the exponentiated softmax at `x`.
    pub fn grad_estimate(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let i = self.pbar.sample(rng);
        let j = self.groups.sample_member(i, rng);
        let m = self.mlmc_gamma(x, &self.center_losses, i, rng)?;
        let mut g = self.problem.ensemble.grad(j, x)?;
        axpy(self.lambda, x, &mut g);
        axpy(-self.lambda, &self.center, &mut g);
        let s = m / self.eps_prime;
        for v in &mut g {
            *v *= s;
        }
        Ok(g)
    }

    /// Snapshot at a reference point for the variance-reduced estimator: all `N` values and
    /// subgradients at `x_ref`, the exact gradient there and the reweighting factor.
    pub fn reference(&self, x_ref: &[f64]) -> Result<GroupRef> {
        check_in_ball(x_ref, &self.center, self.radius, "reference point")?;
        let ep = self.eps_prime;
        let losses = self.problem.ensemble.values(x_ref)?;
        let grads = self.problem.ensemble.grads(x_ref)?;
        let gl = self.groups.combine(&losses);
        let scaled_ref: Vec<f64> = gl.iter().map(|v| v / ep).collect();
        let scaled_center: Vec<f64> = self.center_groups.iter().map(|v| v / ep).collect();
        let log_pi = log_sum_exp(&scaled_ref) - log_sum_exp(&scaled_center);
        let sampler = SamplingDistribution::from_log_weights(&scaled_ref)?;
        let gamma_ref = ep * (self.shift(x_ref) / ep).exp();
        let q = self.groups.pull_back(sampler.probs(), self.problem.n());
        let mut full = vec![0.0; x_ref.len()];
        for (qj, gj) in q.iter().zip(&grads) {
            if *qj != 0.0 {
                axpy(*qj, gj, &mut full);
            }
        }
        axpy(self.lambda, x_ref, &mut full);
        axpy(-self.lambda, &self.center, &mut full);
        let s = log_pi.exp() * gamma_ref / ep;
        for v in &mut full {
            *v *= s;
        }
        Ok(GroupRef {
            x: x_ref.to_vec(),
            losses,
            grads,
            sampler,
            log_pi,
            gamma_ref,
            full_grad: full,
        })
    }

    /// Exact value of the exponentiated softmax at a reference point, from its snapshot.
    pub fn gamma_at(&self, r: &GroupRef) -> f64 {
        r.log_pi.exp() * r.gamma_ref
    }

    /// Variance-reduced estimate of the exponentiated-softmax gradient at `x` around `r`.
    pub fn svrg_estimate(&self, x: &[f64], r: &GroupRef, rng: &mut Rng) -> Result<Vec<f64>> {
        let i = r.sampler.sample(rng);
        let j = self.groups.sample_member(i, rng);
        let m = self.mlmc_gamma(x, &r.losses, i, rng)?;
        let gx = self.problem.ensemble.grad(j, x)?;
        let pi = r.log_pi.exp();
        let a = pi * m / self.eps_prime;
        let b = pi * r.gamma_ref / self.eps_prime;
        let mut g = r.full_grad.clone();
        for k in 0..g.len() {
            let lam_x = self.lambda * (x[k] - self.center[k]);
            let lam_r = self.lambda * (r.x[k] - self.center[k]);
            g[k] += a * (gx[k] + lam_x) - b * (r.grads[j][k] + lam_r);
        }
        Ok(g)
    }
}

/// Cached data at a variance-reduction reference point (group problems).
#[derive(Debug, Clone)]
pub struct GroupRef {
    pub x: Vec<f64>,
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    /// `softmax(L(x_ref) / eps')`
    pub sampler: SamplingDistribution,
    /// Log of the ratio of softmax normalizers at `x_ref` and at the center.
    pub log_pi: f64,
    /// `eps' exp(lambda/2 |x_ref - c|^2 / eps')`
    pub gamma_ref: f64,
    pub full_grad: Vec<f64>,
}

/// Ball data for f-divergence problems: center, optimal dual scalar there and the
/// importance weights `pbar_i = t*(l_i(c) - G ybar)`.
#[derive(Debug, Clone)]
pub struct DualBall<'a> {
    pub problem: &'a Problem,
    pub conj: RegularizedConjugate,
    pub center: Vec<f64>,
    pub ybar: f64,
    pub radius: f64,
    pub lambda: f64,
    pub g: f64,
    pub center_losses: Vec<f64>,
    pub pbar: SamplingDistribution,
}

impl<'a> DualBall<'a> {
    /// One full pass of values at `center`, then the exact dual scalar and `pbar`.
    pub fn build(problem: &'a Problem, center: &[f64], lambda: f64) -> Result<Self> {
        let conj = problem
            .conjugate()
            .ok_or_else(|| DroError::Config("dual estimators need an f-divergence problem".into()))?;
        let g = problem.lipschitz();
        let center_losses = problem.ensemble.values(center)?;
        let ybar = conj.solve_y_star(&center_losses, g)?;
        let logs: Vec<f64> = center_losses
            .iter()
            .map(|&l| conj.log_argmax(l - g * ybar))
            .collect::<Result<_>>()?;
        let sum = log_sum_exp(&logs).exp();
        let tol = RegularizedConjugate::y_tol(&center_losses);
        if (sum - 1.0).abs() > 10.0 * tol {
            return Err(DroError::PmfInconsistent { sum });
        }
        Ok(Self {
            problem,
            conj,
            center: center.to_vec(),
            ybar,
            radius: problem.r_eps(),
            lambda,
            g,
            center_losses,
            pbar: SamplingDistribution::from_log_weights(&logs)?,
        })
    }

    /// Importance ratio `t*(l - G y) / pbar_i`, checked against its in-ball bound.
    fn ratio(&self, i: usize, loss: f64, y: f64) -> Result<f64> {
        let rho = (self.conj.log_argmax(loss - self.g * y)? - self.pbar.log_prob(i)).exp();
        if rho > std::f64::consts::E.powi(2) * (1.0 + RATIO_SLACK) {
            return Err(DroError::RatioBound { ratio: rho });
        }
        Ok(rho)
    }

    fn check(&self, x: &[f64], y: f64) -> Result<()> {
        check_in_ball(x, &self.center, self.radius, "dual query point")?;
        if (y - self.ybar).abs() > self.radius * (1.0 + 1e-9) + 1e-14 {
            return Err(DroError::Precondition(format!(
                "dual scalar {y} outside [{} +- {}]",
                self.ybar, self.radius
            )));
        }
        Ok(())
    }

    /// Unbiased estimate of `(grad_x Upsilon, d/dy Upsilon)` without the proximal term.
    pub fn grad_estimate(&self, x: &[f64], y: f64, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        self.check(x, y)?;
        let i = self.pbar.sample(rng);
        let l = self.problem.ensemble.value(i, x)?;
        let rho = self.ratio(i, l, y)?;
        let mut gx = self.problem.ensemble.grad(i, x)?;
        for v in &mut gx {
            *v *= rho;
        }
        Ok((gx, self.g * (1.0 - rho)))
    }

    /// Full pass at `(x, y)`: values, subgradients and the exact gradient of the
    /// regularized dual objective.
    pub fn reference(&self, x: &[f64], y: f64) -> Result<DualRef> {
        self.check(x, y)?;
        let losses = self.problem.ensemble.values(x)?;
        let grads = self.problem.ensemble.grads(x)?;
        let log_t: Vec<f64> = losses
            .iter()
            .map(|&l| self.conj.log_argmax(l - self.g * y))
            .collect::<Result<_>>()?;
        let mut gx = vec![0.0; x.len()];
        let mut tsum = 0.0;
        for (lt, gi) in log_t.iter().zip(&grads) {
            let t = lt.exp();
            tsum += t;
            axpy(t, gi, &mut gx);
        }
        axpy(self.lambda, x, &mut gx);
        axpy(-self.lambda, &self.center, &mut gx);
        let gy = self.g * (1.0 - tsum);
        let value = self
            .conj
            .upsilon_value(&losses, y, self.g, 0.5 * self.lambda * dist_sq(x, &self.center))?;
        Ok(DualRef { x: x.to_vec(), y, losses, grads, log_t, full_grad_x: gx, full_grad_y: gy, value })
    }

    /// Variance-reduced estimate of the gradient of `Upsilon + lambda/2 |x - c|^2` at
    /// `(x, y)` using component `i` (drawn from `pbar` by the caller).
    pub fn svrg_estimate(&self, x: &[f64], y: f64, r: &DualRef, i: usize) -> Result<(Vec<f64>, f64)> {
        self.check(x, y)?;
        let l = self.problem.ensemble.value(i, x)?;
        let rho = self.ratio(i, l, y)?;
        let rho_ref = (r.log_t[i] - self.pbar.log_prob(i)).exp();
        let gi = self.problem.ensemble.grad(i, x)?;
        let mut gx = r.full_grad_x.clone();
        for k in 0..gx.len() {
            gx[k] += rho * gi[k] - rho_ref * r.grads[i][k] + self.lambda * (x[k] - r.x[k]);
        }
        let gy = r.full_grad_y - self.g * rho + self.g * rho_ref;
        Ok((gx, gy))
    }
}

/// Cached data at a variance-reduction reference point (f-divergence problems).
#[derive(Debug, Clone)]
pub struct DualRef {
    pub x: Vec<f64>,
    pub y: f64,
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    /// `log t*(l_i(x) - G y)`
    pub log_t: Vec<f64>,
    pub full_grad_x: Vec<f64>,
    pub full_grad_y: f64,
    /// `Upsilon(x, y) + lambda/2 |x - c|^2`
    pub value: f64,
}
