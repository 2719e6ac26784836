//! Loss ensembles, group structure, oracle metering and exact objective evaluation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::divergence::{Divergence, RegularizedConjugate};
use crate::error::{invalid, DroError, Result};
use crate::linalg::{dist, dot, log_sum_exp, softmax, Ball};
use crate::rng::Rng;

/// Built-in convex loss families. Each is a scalar function of the affine score
/// `z = <a, x> + b`, so Lipschitz and smoothness constants are known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Loss {
    /// `z`
    Linear { a: Vec<f64>, b: f64 },
    /// `max(0, z)`
    Hinge { a: Vec<f64>, b: f64 },
    /// `|z|`
    Absolute { a: Vec<f64>, b: f64 },
    /// Huber function of `z` with transition width `width`.
    Huber { a: Vec<f64>, b: f64, width: f64 },
    /// `log(1 + e^z)`
    Logistic { a: Vec<f64>, b: f64 },
}

fn huber(z: f64, w: f64) -> f64 {
    if z.abs() <= w {
        z * z / (2.0 * w)
    } else {
        z.abs() - w / 2.0
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Loss {
    fn parts(&self) -> (&[f64], f64) {
        match self {
            Loss::Linear { a, b }
            | Loss::Hinge { a, b }
            | Loss::Absolute { a, b }
            | Loss::Huber { a, b, .. }
            | Loss::Logistic { a, b } => (a, *b),
        }
    }

    pub fn dim(&self) -> usize {
        self.parts().0.len()
    }

    fn score(&self, x: &[f64]) -> f64 {
        let (a, b) = self.parts();
        dot(a, x) + b
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let z = self.score(x);
        match self {
            Loss::Linear { .. } => z,
            Loss::Hinge { .. } => z.max(0.0),
            Loss::Absolute { .. } => z.abs(),
            Loss::Huber { width, .. } => huber(z, *width),
            Loss::Logistic { .. } => softplus(z),
        }
    }

    /// Derivative of the scalar profile at the current score (a subgradient at kinks).
    fn slope(&self, z: f64) -> f64 {
        match self {
            Loss::Linear { .. } => 1.0,
            Loss::Hinge { .. } => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Loss::Absolute { .. } => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Loss::Huber { width, .. } => (z / width).clamp(-1.0, 1.0),
            Loss::Logistic { .. } => sigmoid(z),
        }
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let (a, _) = self.parts();
        let s = self.slope(self.score(x));
        for (o, ai) in out.iter_mut().zip(a) {
            *o = s * ai;
        }
    }

    pub fn lipschitz(&self) -> f64 {
        let (a, _) = self.parts();
        dot(a, a).sqrt()
    }

    pub fn smoothness(&self) -> f64 {
        let (a, _) = self.parts();
        let n2 = dot(a, a);
        match self {
            Loss::Linear { .. } => 0.0,
            Loss::Hinge { .. } | Loss::Absolute { .. } => f64::INFINITY,
            Loss::Huber { width, .. } => n2 / width,
            Loss::Logistic { .. } => n2 / 4.0,
        }
    }

    /// Supremum of `|loss|` over a ball.
    pub fn bound_on(&self, ball: &Ball) -> f64 {
        let (a, _) = self.parts();
        let zc = self.score(&ball.center);
        let spread = dot(a, a).sqrt() * ball.radius;
        let (lo, hi) = (zc - spread, zc + spread);
        let zmax = lo.abs().max(hi.abs());
        match self {
            Loss::Linear { .. } | Loss::Absolute { .. } => zmax,
            Loss::Hinge { .. } => hi.max(0.0),
            Loss::Huber { width, .. } => huber(zmax, *width),
            Loss::Logistic { .. } => softplus(hi),
        }
    }
}

/// Cumulative oracle usage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub value_evals: u64,
    pub subgrad_evals: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.value_evals + self.subgrad_evals
    }

    pub fn since(&self, earlier: Counts) -> Counts {
        Counts {
            value_evals: self.value_evals - earlier.value_evals,
            subgrad_evals: self.subgrad_evals - earlier.subgrad_evals,
        }
    }
}

/// Evaluation counter shared by every clone of an ensemble.
#[derive(Debug, Default)]
pub struct OracleCounter {
    value: AtomicU64,
    subgrad: AtomicU64,
}

impl OracleCounter {
    pub fn snapshot(&self) -> Counts {
        Counts {
            value_evals: self.value.load(Ordering::Relaxed),
            subgrad_evals: self.subgrad.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.value.store(0, Ordering::Relaxed);
        self.subgrad.store(0, Ordering::Relaxed);
    }

    fn add_values(&self, k: u64) {
        self.value.fetch_add(k, Ordering::Relaxed);
    }

    fn add_subgrads(&self, k: u64) {
        self.subgrad.fetch_add(k, Ordering::Relaxed);
    }
}

/// Problem constants `G` (Lipschitz), `R` (domain diameter), `L` (smoothness), `B_l` (loss bound).
/// Infinite values are written as `null` in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub lipschitz: f64,
    pub diameter: f64,
    #[serde(with = "null_is_infinite")]
    pub smoothness: f64,
    #[serde(with = "null_is_infinite")]
    pub loss_bound: f64,
}

mod null_is_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// `N` metered convex losses over a Euclidean ball domain.
#[derive(Debug, Clone)]
pub struct LossEnsemble {
    losses: Vec<Loss>,
    domain: Ball,
    constants: Constants,
    counter: Arc<OracleCounter>,
}

impl LossEnsemble {
    /// Builds an ensemble with analytically derived constants.
    pub fn new(losses: Vec<Loss>, domain: Ball) -> Result<Self> {
        if losses.is_empty() {
            return Err(invalid("losses", "at least one loss is required"));
        }
        if !(domain.radius > 0.0) {
            return Err(invalid("domain.radius", "must be positive"));
        }
        let d = domain.dim();
        if let Some(bad) = losses.iter().find(|l| l.dim() != d) {
            return Err(DroError::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            });
        }
        for l in &losses {
            if let Loss::Huber { width, .. } = l {
                if !(*width > 0.0) {
                    return Err(invalid("huber.width", "must be positive"));
                }
            }
        }
        let g = losses.iter().map(Loss::lipschitz).fold(0.0, f64::max);
        let constants = Constants {
            lipschitz: if g > 0.0 { g } else { 1.0 },
            diameter: 2.0 * domain.radius,
            smoothness: losses.iter().map(Loss::smoothness).fold(0.0, f64::max),
            loss_bound: losses.iter().map(|l| l.bound_on(&domain)).fold(0.0, f64::max),
        };
        Ok(Self {
            losses,
            domain,
            constants,
            counter: Arc::new(OracleCounter::default()),
        })
    }

    /// Replaces constants with user-supplied upper bounds.
    pub fn with_constants(mut self, c: Constants) -> Result<Self> {
        if !(c.lipschitz > 0.0) || !(c.diameter > 0.0) || c.smoothness < 0.0 || c.loss_bound < 0.0 {
            return Err(invalid("constants", "G, R must be positive and L, B_l nonnegative"));
        }
        self.constants = c;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.losses.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn losses(&self) -> &[Loss] {
        &self.losses
    }

    pub fn domain(&self) -> &Ball {
        &self.domain
    }

    pub fn constants(&self) -> &Constants {
        &self.constants
    }

    pub fn counter(&self) -> &OracleCounter {
        &self.counter
    }

    pub fn counts(&self) -> Counts {
        self.counter.snapshot()
    }

    /// Checks dimension and domain membership of `x`.
    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(DroError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.domain.contains(x) {
            return Err(DroError::OutsideDomain {
                distance: dist(x, &self.domain.center),
                radius: self.domain.radius,
            });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(DroError::IndexOutOfRange { index: i, n: self.n() });
        }
        Ok(())
    }

    /// `l_i(x)`; one value evaluation.
    pub fn value(&self, i: usize, x: &[f64]) -> Result<f64> {
        self.check_index(i)?;
        self.check_point(x)?;
        self.counter.add_values(1);
        Ok(self.losses[i].value(x))
    }

    /// A subgradient of `l_i` at `x`; one subgradient evaluation.
    pub fn grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_index(i)?;
        self.check_point(x)?;
        self.counter.add_subgrads(1);
        self.losses[i].grad_into(x, out);
        Ok(())
    }

    pub fn grad(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.grad_into(i, x, &mut g)?;
        Ok(g)
    }

    /// All `N` values at `x`; `N` value evaluations.
    pub fn values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.counter.add_values(self.n() as u64);
        Ok(self.losses.iter().map(|l| l.value(x)).collect())
    }

    /// All `N` subgradients at `x`; `N` subgradient evaluations.
    pub fn grads(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_point(x)?;
        self.counter.add_subgrads(self.n() as u64);
        Ok(self
            .losses
            .iter()
            .map(|l| {
                let mut g = vec![0.0; x.len()];
                l.grad_into(x, &mut g);
                g
            })
            .collect())
    }

    /// Unmetered values, reserved for measurement and certification.
    pub fn peek_values(&self, x: &[f64]) -> Vec<f64> {
        self.losses.iter().map(|l| l.value(x)).collect()
    }

    /// Unmetered subgradient, reserved for measurement and certification.
    pub fn peek_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.losses[i].grad_into(x, &mut g);
        g
    }
}

/// Row-stochastic sparse weights defining group losses `L_i = sum_j w_ij l_j`.
#[derive(Debug, Clone)]
pub struct GroupWeights {
    rows: Vec<Vec<(usize, f64)>>,
    samplers: Vec<WeightedIndex<f64>>,
}

impl GroupWeights {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, n: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("groups", "at least one group is required"));
        }
        let mut samplers = Vec::with_capacity(rows.len());
        for (g, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(invalid("groups", format!("group {g} is empty")));
            }
            let mut s = 0.0;
            for &(j, w) in row {
                if j >= n {
                    return Err(DroError::IndexOutOfRange { index: j, n });
                }
                if !(w >= 0.0) {
                    return Err(invalid("groups", format!("group {g} has a negative weight")));
                }
                s += w;
            }
            if (s - 1.0).abs() > 1e-12 {
                return Err(invalid("groups", format!("group {g} sums to {s}")));
            }
            samplers.push(
                WeightedIndex::new(row.iter().map(|e| e.1))
                    .map_err(|e| invalid("groups", e.to_string()))?,
            );
        }
        Ok(Self { rows, samplers })
    }

    /// Each loss in its own group: the max-loss objective.
    pub fn singletons(n: usize) -> Self {
        Self::new((0..n).map(|j| vec![(j, 1.0)]).collect(), n).expect("singleton groups are valid")
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Draws a member index `j ~ w_i`.
    pub fn sample_member(&self, i: usize, rng: &mut Rng) -> usize {
        let row = &self.rows[i];
        if row.len() == 1 {
            return row[0].0;
        }
        row[self.samplers[i].sample(rng)].0
    }

    /// Group losses from a full vector of loss values.
    pub fn combine(&self, loss_values: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * loss_values[j]).sum())
            .collect()
    }

    /// Effective per-loss weights `sum_i p_i w_ij`.
    pub fn pull_back(&self, p: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (row, &pi) in self.rows.iter().zip(p) {
            for &(j, w) in row {
                out[j] += pi * w;
            }
        }
        out
    }
}

/// Which robust objective is optimized.
#[derive(Debug, Clone)]
pub enum Variant {
    Group(GroupWeights),
    FDiv { divergence: Divergence, constrained: bool },
}

/// A complete problem instance: losses, uncertainty structure and target accuracy.
#[derive(Debug, Clone)]
pub struct Problem {
    pub ensemble: LossEnsemble,
    pub variant: Variant,
    pub eps: f64,
}

impl Problem {
    pub fn new(ensemble: LossEnsemble, variant: Variant, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        if let Variant::FDiv { divergence, .. } = &variant {
            if divergence.n() != ensemble.n() {
                return Err(invalid(
                    "divergence",
                    format!("built for {} losses, ensemble has {}", divergence.n(), ensemble.n()),
                ));
            }
        }
        Ok(Self { ensemble, variant, eps })
    }

    pub fn group(ensemble: LossEnsemble, groups: GroupWeights, eps: f64) -> Result<Self> {
        Self::new(ensemble, Variant::Group(groups), eps)
    }

    pub fn fdiv(ensemble: LossEnsemble, divergence: Divergence, eps: f64) -> Result<Self> {
        Self::new(ensemble, Variant::FDiv { divergence, constrained: false }, eps)
    }

    /// Same losses and metering, different target accuracy.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.ensemble.clone(), self.variant.clone(), eps)
    }

    /// Same losses and metering with the divergence multiplier replaced by `nu`.
    pub fn with_multiplier(&self, nu: f64) -> Result<Self> {
        match &self.variant {
            Variant::FDiv { divergence, constrained } => Self::new(
                self.ensemble.clone(),
                Variant::FDiv {
                    divergence: divergence.with_multiplier(nu)?,
                    constrained: *constrained,
                },
                self.eps,
            ),
            Variant::Group(_) => Err(DroError::Config("group problems have no multiplier".into())),
        }
    }

    pub fn n(&self) -> usize {
        self.ensemble.n()
    }

    pub fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    pub fn constants(&self) -> &Constants {
        self.ensemble.constants()
    }

    pub fn lipschitz(&self) -> f64 {
        self.constants().lipschitz
    }

    pub fn diameter(&self) -> f64 {
        self.constants().diameter
    }

    pub fn domain(&self) -> &Ball {
        self.ensemble.domain()
    }

    pub fn groups(&self) -> Option<&GroupWeights> {
        match &self.variant {
            Variant::Group(g) => Some(g),
            _ => None,
        }
    }

    pub fn divergence(&self) -> Option<&Divergence> {
        match &self.variant {
            Variant::FDiv { divergence, .. } => Some(divergence),
            _ => None,
        }
    }

    pub fn is_constrained(&self) -> bool {
        matches!(self.variant, Variant::FDiv { constrained: true, .. })
    }

    /// Number of outcomes the smoothing entropy ranges over: `M` groups or `N` losses.
    pub fn support_size(&self) -> usize {
        match &self.variant {
            Variant::Group(g) => g.m(),
            Variant::FDiv { .. } => self.n(),
        }
    }

    /// Smoothing level `eps' = eps / (2 log K)`, with `K` clamped to at least 2.
    pub fn eps_prime(&self) -> f64 {
        let k = self.support_size().max(2) as f64;
        self.eps / (2.0 * k.ln())
    }

    /// Ball radius `r_eps = eps' / G`.
    pub fn r_eps(&self) -> f64 {
        self.eps_prime() / self.lipschitz()
    }

    pub fn conjugate(&self) -> Option<RegularizedConjugate> {
        self.divergence()
            .map(|d| RegularizedConjugate::new(d.clone(), self.eps_prime()))
    }

    fn loss_values(&self, x: &[f64], metered: bool) -> Result<Vec<f64>> {
        if metered {
            self.ensemble.values(x)
        } else {
            self.ensemble.check_point(x)?;
            Ok(self.ensemble.peek_values(x))
        }
    }

    /// `L_i(x) = sum_j w_ij l_j(x)`, one value evaluation per nonzero weight.
    pub fn group_loss_exact(&self, i: usize, x: &[f64]) -> Result<f64> {
        let g = self
            .groups()
            .ok_or_else(|| DroError::Config("not a group problem".into()))?;
        if i >= g.m() {
            return Err(DroError::IndexOutOfRange { index: i, n: g.m() });
        }
        let mut s = 0.0;
        for &(j, w) in g.row(i) {
            s += w * self.ensemble.value(j, x)?;
        }
        Ok(s)
    }

    /// Worst group loss `max_i L_i(x)` with one full pass.
    pub fn dro_objective_group(&self, x: &[f64]) -> Result<f64> {
        self.group_objectives(x, true).map(|(max, _)| max)
    }

    fn group_objectives(&self, x: &[f64], metered: bool) -> Result<(f64, f64)> {
        let g = self
            .groups()
            .ok_or_else(|| DroError::Config("not a group problem".into()))?;
        let vals = self.loss_values(x, metered)?;
        let gl = g.combine(&vals);
        let max = gl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ep = self.eps_prime();
        let scaled: Vec<f64> = gl.iter().map(|v| v / ep).collect();
        Ok((max, ep * log_sum_exp(&scaled)))
    }

    /// f-divergence objective. With `regularized`, the entropy-smoothed value
    /// `min_y Upsilon(x, y)`; otherwise the exact penalized worst case.
    pub fn dro_objective_fdiv(&self, x: &[f64], regularized: bool) -> Result<f64> {
        self.fdiv_objective(x, regularized, true)
    }

    fn fdiv_objective(&self, x: &[f64], regularized: bool, metered: bool) -> Result<f64> {
        let div = self
            .divergence()
            .ok_or_else(|| DroError::Config("not an f-divergence problem".into()))?;
        let vals = self.loss_values(x, metered)?;
        if regularized {
            let conj = RegularizedConjugate::new(div.clone(), self.eps_prime());
            let g = self.lipschitz();
            let y = conj.solve_y_star(&vals, g)?;
            conj.upsilon_value(&vals, y, g, 0.0)
        } else {
            Ok(div.worst_case(&vals).0)
        }
    }

    /// The smoothed objective that the ball oracles minimize: group softmax or the
    /// entropy-regularized f-divergence objective.
    pub fn smoothed_objective(&self, x: &[f64]) -> Result<f64> {
        match &self.variant {
            Variant::Group(_) => self.group_objectives(x, true).map(|(_, sm)| sm),
            Variant::FDiv { .. } => self.fdiv_objective(x, true, true),
        }
    }

    /// The unsmoothed robust objective.
    pub fn true_objective(&self, x: &[f64]) -> Result<f64> {
        match &self.variant {
            Variant::Group(_) => self.group_objectives(x, true).map(|(m, _)| m),
            Variant::FDiv { .. } => self.fdiv_objective(x, false, true),
        }
    }

    /// Unmetered [`Problem::true_objective`], for measurement only.
    pub fn peek_true_objective(&self, x: &[f64]) -> Result<f64> {
        match &self.variant {
            Variant::Group(_) => self.group_objectives(x, false).map(|(m, _)| m),
            Variant::FDiv { .. } => self.fdiv_objective(x, false, false),
        }
    }

    /// Unmetered [`Problem::smoothed_objective`], for measurement only.
    pub fn peek_smoothed_objective(&self, x: &[f64]) -> Result<f64> {
        match &self.variant {
            Variant::Group(_) => self.group_objectives(x, false).map(|(_, s)| s),
            Variant::FDiv { .. } => self.fdiv_objective(x, true, false),
        }
    }

    /// Weights `q_j` on individual losses attaining the true objective (a subgradient is
    /// `sum_j q_j grad l_j`), from a vector of loss values.
    pub fn worst_case_weights(&self, vals: &[f64]) -> Vec<f64> {
        match &self.variant {
            Variant::Group(g) => {
                let gl = g.combine(vals);
                let (imax, _) = gl
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                let mut e = vec![0.0; g.m()];
                e[imax] = 1.0;
                g.pull_back(&e, self.n())
            }
            Variant::FDiv { divergence, .. } => divergence.worst_case(vals).1,
        }
    }

    /// Weights on individual losses whose combination is the gradient of the smoothed objective.
    pub fn smoothed_weights(&self, vals: &[f64]) -> Result<Vec<f64>> {
        match &self.variant {
            Variant::Group(g) => {
                let p = softmax(&g.combine(vals), self.eps_prime());
                Ok(g.pull_back(&p, self.n()))
            }
            Variant::FDiv { divergence, .. } => {
                let conj = RegularizedConjugate::new(divergence.clone(), self.eps_prime());
                let g = self.lipschitz();
                let y = conj.solve_y_star(vals, g)?;
                vals.iter().map(|&l| conj.conj_prime(l - g * y)).collect()
            }
        }
    }
}
