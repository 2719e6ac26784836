use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dro_core::accel::{outer_solve, AccelConstants, AccelParams};
use dro_core::baselines::{agd_softmax, default_pd_step, primal_dual_smd, subgradient_solve};
use dro_core::broo::Broo;
use dro_core::broo_fdiv::{DualEpochSgd, RestartedVr};
use dro_core::broo_group::{EpochSgdGroup, KatyushaGroup};
use dro_core::constrained::{accel_dual_solver, solve_constrained_fdiv};
use dro_core::instance::ProblemFile;
use dro_core::problem::{Problem, Variant};
use dro_core::rng::stream;
use dro_core::trace::{SolverTrace, TraceRecord, TraceRecorder};
use dro_core::DroError;
use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, load_problem, Method, RunConfig};
use crate::reference::subgradient_iters;

/// Metadata written next to each trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub method: String,
    pub problem_fingerprint: String,
    pub family: String,
    pub n: usize,
    pub dim: usize,
    pub eps: f64,
    pub seed: u64,
    pub reference_optimum: Option<f64>,
    pub objective: f64,
    pub certified_gap: Option<f64>,
    pub evals_value: u64,
    pub evals_subgrad: u64,
    pub wall_secs: f64,
    pub config: RunConfig,
}

/// A problem and constants that passed every compatibility check.
pub struct Prepared {
    pub file: ProblemFile,
    pub problem: Problem,
    pub consts: AccelConstants,
    pub iters: u64,
}

/// Loads and validates a run without evaluating any loss.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let mut file = load_problem(&cfg.problem)?;
    if let Some(eps) = cfg.eps {
        file.eps = eps;
    }
    if cfg.constrained {
        match file.divergence.as_mut() {
            Some(d) => d.constrained = true,
            None => bail!(DroError::Config("--constrained needs an f-divergence problem".into())),
        }
    }
    let problem = file.build()?;
    let consts = cfg.constants()?;
    if cfg.stride == 0 {
        bail!(DroError::Config("stride must be positive".into()));
    }
    let constrained = problem.is_constrained();
    if constrained && !cfg.method.is_ball_accel() {
        bail!(DroError::Config(format!(
            "constrained problems only run with the ball-accel methods, not {}",
            cfg.method.name()
        )));
    }
    let c = problem.constants();
    match cfg.method {
        Method::BallAccelEpochsgd | Method::BallAccelVr => {
            // Constructing the oracle checks its requirements without evaluating anything.
            let _ = make_broo(&problem, cfg.method)?;
            if constrained && !c.loss_bound.is_finite() {
                bail!(DroError::UnboundedLosses);
            }
            AccelParams::for_problem(&problem, consts)?;
        }
        Method::AgdSoftmax if !c.smoothness.is_finite() => bail!(DroError::NotSmooth),
        Method::PrimalDual if !c.loss_bound.is_finite() => bail!(DroError::UnboundedLosses),
        _ => {}
    }
    let iters = cfg.iters.unwrap_or_else(|| default_iters(&problem, cfg.method));
    Ok(Prepared { file, problem, consts, iters })
}

fn make_broo<'a>(problem: &'a Problem, method: Method) -> Result<Box<dyn Broo + 'a>> {
    let vr = method == Method::BallAccelVr;
    Ok(match (&problem.variant, vr) {
        (Variant::Group(_), false) => Box::new(EpochSgdGroup::new(problem)?),
        (Variant::Group(_), true) => Box::new(KatyushaGroup::new(problem)?),
        (Variant::FDiv { .. }, false) => Box::new(DualEpochSgd::new(problem)?),
        (Variant::FDiv { .. }, true) => Box::new(RestartedVr::new(problem)?),
    })
}

/// Iteration budgets matched to each method's rate at the problem's accuracy.
pub fn default_iters(problem: &Problem, method: Method) -> u64 {
    let c = problem.constants();
    let eps = problem.eps;
    match method {
        Method::Subgradient => subgradient_iters(problem),
        Method::PrimalDual => {
            let m = problem.support_size().max(2) as f64;
            let b = if c.loss_bound.is_finite() { c.loss_bound } else { 0.0 };
            (((c.lipschitz * c.diameter).powi(2) + m * b * b) * m.ln() / (eps * eps)).ceil() as u64
        }
        Method::AgdSoftmax => {
            let l = c.smoothness + c.lipschitz.powi(2) / problem.eps_prime();
            (c.diameter * (2.0 * l / eps).sqrt()).ceil().max(1.0) as u64
        }
        Method::BallAccelEpochsgd | Method::BallAccelVr => 0,
    }
}

/// Runs a prepared configuration and returns its trace.
pub fn execute(cfg: &RunConfig, prep: &Prepared) -> Result<SolverTrace> {
    let p = &prep.problem;
    let reference = prep.file.reference_optimum;
    let x0 = p.domain().center.clone();
    let mut rng = stream(cfg.seed, &format!("run/{}", cfg.method.name()));
    let rec = TraceRecorder::new(p, reference).with_stride(cfg.stride);
    let trace = if p.is_constrained() {
        let clock = std::time::Instant::now();
        let solver = accel_dual_solver(prep.consts, cfg.method == Method::BallAccelVr);
        let res = solve_constrained_fdiv(p, p.eps, solver, &mut rng)?;
        let evals = rec.counts();
        let record = TraceRecord {
            evals_value: evals.value_evals,
            evals_subgrad: evals.subgrad_evals,
            gap_estimate: reference.map_or(f64::NAN, |r| res.value - r),
            objective: res.value,
        };
        SolverTrace {
            method: cfg.method.name().to_string(),
            records: vec![record],
            x: res.x,
            objective: res.value,
            certified_gap: reference.map(|r| res.value - r),
            evals,
            wall_secs: clock.elapsed().as_secs_f64(),
        }
    } else {
        match cfg.method {
            Method::BallAccelEpochsgd | Method::BallAccelVr => {
                let broo = make_broo(p, cfg.method)?;
                let params = AccelParams::for_problem(p, prep.consts)?;
                let mut rec = rec;
                let mut failure = None;
                let res = outer_solve(broo.as_ref(), &params, &x0, &mut rng, |s, _| {
                    if failure.is_none() {
                        failure = rec.record(&s.x).err();
                    }
                })?;
                if let Some(e) = failure {
                    return Err(e.into());
                }
                rec.finish(cfg.method.name(), res.x)?
            }
            Method::Subgradient => subgradient_solve(p, &x0, prep.iters, rec)?,
            Method::PrimalDual => {
                let eta = default_pd_step(p, cfg.step_scale)?;
                primal_dual_smd(p, &x0, prep.iters, eta, &mut rng, rec)?.trace
            }
            Method::AgdSoftmax => agd_softmax(p, &x0, prep.iters, rec)?,
        }
    };
    Ok(trace)
}

/// Output path: the configured one, or `<dir>/<method>-seed<seed>.csv`.
pub fn output_path(cfg: &RunConfig, out_dir: &Path) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("{}-seed{}.csv", cfg.method.name(), cfg.seed)))
}

pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_trace(path: &Path, trace: &SolverTrace, meta: &TraceMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in &trace.records {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<(Vec<TraceRecord>, TraceMeta)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let records = r.deserialize().collect::<std::result::Result<Vec<TraceRecord>, _>>()?;
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).with_context(|| format!("reading {}", mp.display()))?;
    Ok((records, serde_json::from_str(&text)?))
}

/// Full `run` subcommand: prepare, execute, write CSV and metadata.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, TraceMeta)> {
    let prep = prepare(cfg)?;
    let trace = execute(cfg, &prep)?;
    let meta = TraceMeta {
        method: trace.method.clone(),
        problem_fingerprint: fingerprint(&prep.file),
        family: prep.file.family.clone(),
        n: prep.problem.n(),
        dim: prep.problem.dim(),
        eps: prep.problem.eps,
        seed: cfg.seed,
        reference_optimum: prep.file.reference_optimum,
        objective: trace.objective,
        certified_gap: trace.certified_gap,
        evals_value: trace.evals.value_evals,
        evals_subgrad: trace.evals.subgrad_evals,
        wall_secs: trace.wall_secs,
        config: cfg.clone(),
    };
    let path = output_path(cfg, out_dir);
    write_trace(&path, &trace, &meta)?;
    Ok((path, meta))
}
