//! Divergence penalties, their entropy-regularized Fenchel conjugates and the scalar dual solve.
//!
//! For a penalty `psi(t) = (nu/N) f(N t)` on `t >= 0` and smoothing level `eps'`, the
//! regularized penalty is `psi_eps(t) = psi(t) + eps' t log t`. Its conjugate
//! `psi_eps*(v) = max_t { v t - psi_eps(t) }` is attained at a unique `t*(v) > 0`, which is
//! also the conjugate's derivative. The maximizer is computed in log space because
//! `log t*(v)` is `1/eps'`-Lipschitz in `v` and stays well scaled where `t*` itself
//! under- or overflows.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DroError, Result};
use crate::linalg::log_sum_exp;

/// Generator `f` of the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceKind {
    /// No penalty.
    Zero,
    /// `f(s) = 0` for `s <= 1/alpha`, `+inf` beyond: caps every weight at `1/(alpha N)`.
    Cvar { alpha: f64 },
    /// `f(s) = (s - 1)^2 / (2 rho)`.
    Chi2 { rho: f64 },
}

/// The penalty `psi(t) = (nu/N) f(N t)` over `N` outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    kind: DivergenceKind,
    nu: f64,
    n: usize,
}

impl Divergence {
    pub fn new(kind: DivergenceKind, nu: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(invalid("nu", "must be finite and nonnegative"));
        }
        match kind {
            DivergenceKind::Cvar { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                return Err(invalid("alpha", "must lie in (0, 1]"));
            }
            DivergenceKind::Chi2 { rho } if !(rho > 0.0) => {
                return Err(invalid("rho", "must be positive"));
            }
            _ => {}
        }
        Ok(Self { kind, nu, n })
    }

    pub fn zero(n: usize) -> Self {
        Self { kind: DivergenceKind::Zero, nu: 0.0, n }
    }

    /// Parses `"zero"`, `"cvar:alpha=0.1"` or `"chi2:rho=1"`.
    pub fn parse(spec: &str, nu: f64, n: usize) -> Result<Self> {
        let spec = spec.trim();
        let (name, args) = match spec.split_once(':') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (spec, ""),
        };
        let param = |key: &str| -> Result<f64> {
            for kv in args.split(',').filter(|s| !s.trim().is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| DroError::Config(format!("malformed divergence argument `{kv}`")))?;
                if k.trim() == key {
                    return v
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| DroError::Config(format!("bad value for `{key}`: {e}")));
                }
            }
            Err(DroError::Config(format!("divergence `{name}` needs `{key}=...`")))
        };
        let kind = match name {
            "zero" => DivergenceKind::Zero,
            "cvar" => DivergenceKind::Cvar { alpha: param("alpha")? },
            "chi2" => DivergenceKind::Chi2 { rho: param("rho")? },
            other => return Err(DroError::Config(format!("unknown divergence `{other}`"))),
        };
        Self::new(kind, nu, n)
    }

    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn with_multiplier(&self, nu: f64) -> Result<Self> {
        Self::new(self.kind, nu, self.n)
    }

    /// True when the penalty vanishes identically.
    pub fn is_null(&self) -> bool {
        self.nu == 0.0 || matches!(self.kind, DivergenceKind::Zero)
    }

    /// Right end of `dom psi`.
    pub fn domain_upper(&self) -> f64 {
        match self.kind {
            DivergenceKind::Cvar { alpha } if self.nu > 0.0 => 1.0 / (alpha * self.n as f64),
            _ => f64::INFINITY,
        }
    }

    /// `f` itself.
    pub fn f(&self, s: f64) -> f64 {
        match self.kind {
            DivergenceKind::Zero => 0.0,
            DivergenceKind::Cvar { alpha } => {
                if s <= 1.0 / alpha * (1.0 + 1e-12) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            DivergenceKind::Chi2 { rho } => (s - 1.0) * (s - 1.0) / (2.0 * rho),
        }
    }

    /// Bound `B_f >= 1` on `f` over the simplex image `[0, N]`.
    pub fn f_bound(&self) -> f64 {
        match self.kind {
            DivergenceKind::Zero | DivergenceKind::Cvar { .. } => 1.0,
            DivergenceKind::Chi2 { rho } => {
                let n = self.n as f64;
                ((n - 1.0) * (n - 1.0) / (2.0 * rho)).max(1.0 / (2.0 * rho)).max(1.0)
            }
        }
    }

    /// `psi(t)`, `+inf` outside the domain.
    pub fn psi(&self, t: f64) -> f64 {
        if self.nu == 0.0 {
            return 0.0;
        }
        let n = self.n as f64;
        self.nu / n * self.f(n * t)
    }

    fn psi_prime(&self, t: f64) -> f64 {
        match self.kind {
            DivergenceKind::Chi2 { rho } => self.nu / rho * (self.n as f64 * t - 1.0),
            _ => 0.0,
        }
    }

    fn psi_second(&self, _t: f64) -> f64 {
        match self.kind {
            DivergenceKind::Chi2 { rho } => self.nu / rho * self.n as f64,
            _ => 0.0,
        }
    }

    /// Penalty summed over a weight vector.
    pub fn penalty(&self, q: &[f64]) -> f64 {
        q.iter().map(|&t| self.psi(t)).sum()
    }

    /// Exact penalized worst case `max_{q in simplex} <q, l> - sum_i psi(q_i)` and its maximizer.
    pub fn worst_case(&self, losses: &[f64]) -> (f64, Vec<f64>) {
        let n = losses.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap());
        let mut q = vec![0.0; n];
        if self.is_null() {
            q[order[0]] = 1.0;
            return (losses[order[0]], q);
        }
        match self.kind {
            DivergenceKind::Zero => unreachable!(),
            DivergenceKind::Cvar { .. } => {
                let cap = self.domain_upper().min(1.0);
                let mut left = 1.0;
                for &i in &order {
                    let t = cap.min(left);
                    q[i] = t;
                    left -= t;
                    if left <= 0.0 {
                        break;
                    }
                }
            }
            DivergenceKind::Chi2 { rho } => {
                // q_i = max(0, 1 + rho (l_i - mu) / nu) / N with mu fixed by sum q = 1.
                let c = rho / self.nu;
                let nf = n as f64;
                let mut mu = 0.0;
                let mut prefix = 0.0;
                for (k, &i) in order.iter().enumerate() {
                    prefix += losses[i];
                    let kk = (k + 1) as f64;
                    // With the top k+1 active: sum (1 + c (l - mu)) = N.
                    let cand = (kk + c * prefix - nf) / (c * kk);
                    let next_inactive = order
                        .get(k + 1)
                        .map(|&j| 1.0 + c * (losses[j] - cand) <= 0.0)
                        .unwrap_or(true);
                    if 1.0 + c * (losses[i] - cand) > 0.0 && next_inactive {
                        mu = cand;
                        break;
                    }
                }
                for i in 0..n {
                    q[i] = (1.0 + c * (losses[i] - mu)).max(0.0) / nf;
                }
                let s: f64 = q.iter().sum();
                for v in &mut q {
                    *v /= s;
                }
            }
        }
        let val = q.iter().zip(losses).map(|(a, b)| a * b).sum::<f64>() - self.penalty(&q);
        (val, q)
    }
}

/// Conjugate machinery for `psi_eps = psi + eps' t log t`.
#[derive(Debug, Clone)]
pub struct RegularizedConjugate {
    pub divergence: Divergence,
    pub eps_prime: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
}

/// Safeguarded Newton iteration for a decreasing function with a sign-changing bracket.
fn newton_decreasing(
    f: impl Fn(f64) -> (f64, f64),
    mut lo: f64,
    mut hi: f64,
    start: f64,
    tol: f64,
    ftol: f64,
    max_iter: usize,
) -> Option<f64> {
    let mut x = start.clamp(lo, hi);
    for _ in 0..max_iter {
        let (fx, dfx) = f(x);
        if fx.abs() <= ftol {
            return Some(x);
        }
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= tol * (1.0 + x.abs()) {
            return Some(0.5 * (lo + hi));
        }
        let step = if dfx < 0.0 { x - fx / dfx } else { f64::NAN };
        x = if step.is_finite() && step > lo && step < hi {
            if (step - x).abs() <= tol * (1.0 + x.abs()) {
                return Some(step);
            }
            step
        } else {
            0.5 * (lo + hi)
        };
    }
    None
}

impl RegularizedConjugate {
    pub fn new(divergence: Divergence, eps_prime: f64) -> Self {
        Self {
            divergence,
            eps_prime,
            newton_tol: 1e-13,
            max_iter: 500,
        }
    }

    /// `log t*(v)`, the logarithm of the conjugate maximizer.
    pub fn log_argmax(&self, v: f64) -> Result<f64> {
        let ep = self.eps_prime;
        let d = &self.divergence;
        let free = v / ep - 1.0;
        if d.is_null() {
            return Ok(free);
        }
        match d.kind {
            DivergenceKind::Zero => Ok(free),
            DivergenceKind::Cvar { .. } => Ok(free.min(d.domain_upper().ln())),
            DivergenceKind::Chi2 { .. } => {
                // Stationarity v - psi'(e^s) - eps'(s + 1) = 0 is strictly decreasing in s.
                let phi = |s: f64| {
                    let t = s.exp();
                    (
                        v - d.psi_prime(t) - ep * (s + 1.0),
                        -d.psi_second(t) * t - ep,
                    )
                };
                let hi = (v - d.psi_prime(0.0)) / ep - 1.0;
                let mut width = 1.0;
                let mut lo = hi - width;
                let mut guard = 0;
                while phi(lo).0 < 0.0 {
                    width *= 2.0;
                    lo = hi - width;
                    guard += 1;
                    if guard > 200 {
                        return Err(DroError::ConjugateNonconvergence { lo, hi });
                    }
                }
                newton_decreasing(phi, lo, hi, lo, self.newton_tol, 0.0, self.max_iter)
                    .ok_or(DroError::ConjugateNonconvergence { lo, hi })
            }
        }
    }

    /// `psi_eps*'(v) = t*(v)`.
    pub fn conj_prime(&self, v: f64) -> Result<f64> {
        self.log_argmax(v).map(f64::exp)
    }

    /// `psi_eps*(v)`.
    pub fn conj(&self, v: f64) -> Result<f64> {
        let s = self.log_argmax(v)?;
        let t = s.exp();
        Ok(v * t - self.divergence.psi(t) - self.eps_prime * t * s)
    }

    /// Root-finding tolerance on the weight sum used by [`RegularizedConjugate::solve_y_star`].
    pub fn y_tol(losses: &[f64]) -> f64 {
        let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        1e-10 * (1.0 + m.abs())
    }

    /// `y*` minimizing `Upsilon(y) = sum_i psi_eps*(l_i - G y) + G y`, characterized by
    /// `sum_i t*(l_i - G y*) = 1`.
    pub fn solve_y_star(&self, losses: &[f64], g: f64) -> Result<f64> {
        let ep = self.eps_prime;
        let n = losses.len() as f64;
        if self.divergence.is_null() || matches!(self.divergence.kind, DivergenceKind::Zero) {
            let scaled: Vec<f64> = losses.iter().map(|l| l / ep).collect();
            return Ok((ep * log_sum_exp(&scaled) - ep) / g);
        }
        // Work with z = G y; the weight sum S(z) is strictly decreasing.
        let lmin = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let lmax = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tol = Self::y_tol(losses);
        let mut width = ep * (1.0 + n.ln() + (1.0 / tol).ln());
        let log_sum = |z: f64| -> Result<f64> {
            let logs: Vec<f64> = losses
                .iter()
                .map(|&l| self.log_argmax(l - z))
                .collect::<Result<_>>()?;
            Ok(log_sum_exp(&logs))
        };
        let (mut lo, mut hi) = (lmin - width, lmax + width);
        let mut tries = 0;
        loop {
            let (a, b) = (log_sum(lo)?, log_sum(hi)?);
            if a >= 0.0 && b <= 0.0 {
                break;
            }
            tries += 1;
            if tries > 60 {
                return Err(DroError::BracketFailure { at_lo: a.exp(), at_hi: b.exp() });
            }
            width *= 2.0;
            if a < 0.0 {
                lo = lmin - width;
            }
            if b > 0.0 {
                hi = lmax + width;
            }
        }
        // Newton on log S(z), whose slope is -(sum_i t_i dt_i/dv / t_i) / S.
        let f = |z: f64| -> (f64, f64) {
            let mut s = 0.0;
            let mut ds = 0.0;
            for &l in losses {
                let v = l - z;
                let t = match self.conj_prime(v) {
                    Ok(t) => t,
                    Err(_) => return (f64::NAN, f64::NAN),
                };
                s += t;
                let at_cap = t >= self.divergence.domain_upper() * (1.0 - 1e-12);
                if !at_cap {
                    ds += 1.0 / (self.divergence.psi_second(t) + ep / t);
                }
            }
            (s.ln(), -ds / s)
        };
        let start = {
            let scaled: Vec<f64> = losses.iter().map(|l| l / ep).collect();
            (ep * log_sum_exp(&scaled) - ep).clamp(lo, hi)
        };
        let z = newton_decreasing(f, lo, hi, start, 1e-15, 0.25 * tol, self.max_iter)
            .ok_or(DroError::ConjugateNonconvergence { lo, hi })?;
        let resid = log_sum(z)?.exp() - 1.0;
        if !(resid.abs() <= tol) {
            // One polishing pass by bisection on the (continuous, monotone) sum.
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if log_sum(m)? > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Ok(0.5 * (a + b) / g);
        }
        Ok(z / g)
    }

    /// `sum_i psi_eps*(l_i - G y) + G y + lambda_term`.
    pub fn upsilon_value(&self, losses: &[f64], y: f64, g: f64, lambda_term: f64) -> Result<f64> {
        let mut s = g * y + lambda_term;
        for &l in losses {
            s += self.conj(l - g * y)?;
        }
        Ok(s)
    }
}
