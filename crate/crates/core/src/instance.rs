//! Reproducible problem instances and their JSON representation.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::divergence::Divergence;
use crate::error::{invalid, DroError, Result};
use crate::linalg::{norm, Ball};
use crate::problem::{Constants, GroupWeights, Loss, LossEnsemble, Problem, Variant};
use crate::rng::{stream, Rng};

/// Divergence section of a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    /// `"zero"`, `"cvar:alpha=..."` or `"chi2:rho=..."`.
    pub name: String,
    /// Penalty multiplier.
    #[serde(default = "one")]
    pub nu: f64,
    /// Treat the divergence as a hard constraint `D_f <= 1` instead of a penalty.
    #[serde(default)]
    pub constrained: bool,
}

fn one() -> f64 {
    1.0
}

/// A serialized problem: losses, domain, uncertainty structure, constants and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub domain: Ball,
    pub losses: Vec<Loss>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<(usize, f64)>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceSpec>,
    pub constants: Constants,
    pub eps: f64,
    /// Independently computed optimal value, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_optimum: Option<f64>,
}

impl ProblemFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem files serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DroError::Config(format!("malformed problem file: {e}")))
    }

    /// Builds the in-memory problem. Exactly one of `groups` and `divergence` must be present.
    pub fn build(&self) -> Result<Problem> {
        let ens = LossEnsemble::new(self.losses.clone(), self.domain.clone())?
            .with_constants(self.constants)?;
        let variant = match (&self.groups, &self.divergence) {
            (Some(rows), None) => Variant::Group(GroupWeights::new(rows.clone(), ens.n())?),
            (None, Some(d)) => Variant::FDiv {
                divergence: Divergence::parse(&d.name, d.nu, ens.n())?,
                constrained: d.constrained,
            },
            (Some(_), Some(_)) => {
                return Err(DroError::Config("a problem has either groups or a divergence, not both".into()))
            }
            (None, None) => return Err(DroError::Config("a problem needs groups or a divergence".into())),
        };
        Problem::new(ens, variant, self.eps)
    }

    fn from_parts(
        family: &str,
        seed: u64,
        domain: Ball,
        losses: Vec<Loss>,
        groups: Option<Vec<Vec<(usize, f64)>>>,
        divergence: Option<DivergenceSpec>,
        eps: f64,
    ) -> Result<Self> {
        let ens = LossEnsemble::new(losses.clone(), domain.clone())?;
        Ok(Self {
            family: family.to_string(),
            seed: Some(seed),
            domain,
            losses,
            groups,
            divergence,
            constants: *ens.constants(),
            eps,
            reference_optimum: None,
        })
    }
}

fn gaussian_vec(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = gaussian_vec(d, rng);
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn check_sizes(n: usize, d: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid("n", "must be positive"));
    }
    if d == 0 {
        return Err(invalid("d", "must be positive"));
    }
    Ok(())
}

fn unit_ball(d: usize) -> Ball {
    Ball::new(vec![0.0; d], 1.0)
}

/// Maximum of `n` linear losses `<a_i, x> + b_i` over the unit ball, with unit-norm `a_i`
/// tilted toward a shared random direction and offsets in `[0, 0.1)`. The tilt puts the
/// minimizer near the boundary, far from the center. Every loss is its own group.
pub fn max_of_linear(n: usize, d: usize, eps: f64, seed: u64) -> Result<ProblemFile> {
    check_sizes(n, d)?;
    let mut rng = stream(seed, "generate/max-of-linear");
    let drift = unit_vec(d, &mut rng);
    let losses = (0..n)
        .map(|_| {
            let mut a = unit_vec(d, &mut rng);
            for (ak, dk) in a.iter_mut().zip(&drift) {
                *ak += MAX_LINEAR_TILT * dk;
            }
            let na = norm(&a);
            a.iter_mut().for_each(|v| *v /= na);
            let b = 0.1 * rng.random::<f64>();
            Loss::Linear { a, b }
        })
        .collect();
    let groups = (0..n).map(|j| vec![(j, 1.0)]).collect();
    ProblemFile::from_parts("max-of-linear", seed, unit_ball(d), losses, Some(groups), None, eps)
}

const MAX_LINEAR_TILT: f64 = 1.0;

/// Hinge losses `max(0, <a_j, x> + b_j)` partitioned into `m` overlapping groups, each
/// holding between two and four members with random weights.
pub fn overlapping_hinge_groups(n: usize, m: usize, d: usize, eps: f64, seed: u64) -> Result<ProblemFile> {
    check_sizes(n, d)?;
    if m == 0 {
        return Err(invalid("m", "must be positive"));
    }
    let mut rng = stream(seed, "generate/hinge-groups");
    let losses = (0..n)
        .map(|_| Loss::Hinge { a: unit_vec(d, &mut rng), b: 0.5 * rng.random::<f64>() })
        .collect();
    let groups = random_groups(n, m, &mut rng);
    ProblemFile::from_parts("hinge-groups", seed, unit_ball(d), losses, Some(groups), None, eps)
}

/// Logistic losses `log(1 + e^{<a_j, x> + b_j})` in overlapping groups: a smooth family.
pub fn smooth_groups(n: usize, m: usize, d: usize, eps: f64, seed: u64) -> Result<ProblemFile> {
    check_sizes(n, d)?;
    if m == 0 {
        return Err(invalid("m", "must be positive"));
    }
    let mut rng = stream(seed, "generate/smooth-groups");
    let losses = (0..n)
        .map(|_| Loss::Logistic { a: unit_vec(d, &mut rng), b: rng.random::<f64>() - 0.5 })
        .collect();
    let groups = random_groups(n, m, &mut rng);
    ProblemFile::from_parts("smooth-groups", seed, unit_ball(d), losses, Some(groups), None, eps)
}

fn random_groups(n: usize, m: usize, rng: &mut Rng) -> Vec<Vec<(usize, f64)>> {
    (0..m)
        .map(|_| {
            let size = rng.random_range(2..=4usize).min(n);
            let mut members: Vec<usize> = Vec::with_capacity(size);
            while members.len() < size {
                let j = rng.random_range(0..n);
                if !members.contains(&j) {
                    members.push(j);
                }
            }
            members.sort_unstable();
            let w: Vec<f64> = members.iter().map(|_| 0.2 + rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            let mut row: Vec<(usize, f64)> = members.into_iter().zip(w).map(|(j, wj)| (j, wj / s)).collect();
            // Make the row sum exactly one in floating point.
            let tail: f64 = row[..row.len() - 1].iter().map(|e| e.1).sum();
            let last = row.len() - 1;
            row[last].1 = 1.0 - tail;
            row
        })
        .collect()
}

/// Regression residual losses `|<a_i, x> - b_i|` (or Huber of the residual when `huber`
/// is set) under an f-divergence.
pub fn regression(
    n: usize,
    d: usize,
    divergence: DivergenceSpec,
    huber: Option<f64>,
    eps: f64,
    seed: u64,
) -> Result<ProblemFile> {
    check_sizes(n, d)?;
    let mut rng = stream(seed, "generate/regression");
    let truth = gaussian_vec(d, &mut rng).into_iter().map(|v| 0.5 * v / (d as f64).sqrt()).collect::<Vec<_>>();
    let losses = (0..n)
        .map(|_| {
            let a = unit_vec(d, &mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let target = crate::linalg::dot(&a, &truth) + 0.3 * noise;
            match huber {
                Some(width) => Loss::Huber { a, b: -target, width },
                None => Loss::Absolute { a, b: -target },
            }
        })
        .collect();
    // Validate the divergence string up front.
    Divergence::parse(&divergence.name, divergence.nu, n)?;
    ProblemFile::from_parts("regression", seed, unit_ball(d), losses, None, Some(divergence), eps)
}
