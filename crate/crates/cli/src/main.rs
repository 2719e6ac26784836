use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drobench::compare::compare;
use drobench::config::{parse_override, Method, Preset, RunConfig};
use drobench::generate::{generate, Family, GenerateSpec};
use drobench::run::run;
use drobench::OUT_DIR_ENV;

#[derive(Parser)]
#[command(name = "drobench", version, about = "Generate DRO instances, run metered solvers, compare traces")]
struct Cli {
    /// Directory for generated problems and traces.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reproducible problem file.
    Generate(GenerateArgs),
    /// Run one method on a problem file and write its trace.
    Run(RunArgs),
    /// Tabulate evaluations to a target gap across traces of one problem.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Number of groups for the group families.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// `cvar:alpha=...`, `chi2:rho=...` or `zero`.
    #[arg(long, default_value = "cvar:alpha=0.5")]
    divergence: String,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    /// Store the divergence as a hard constraint.
    #[arg(long)]
    constrained: bool,
    /// Huber width for smooth regression losses.
    #[arg(long)]
    huber: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute and store a reference optimum.
    #[arg(long)]
    reference: bool,
    /// Output file; defaults to `<out-dir>/<family>-n<n>-d<d>-seed<seed>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; the other flags are ignored when given.
    #[arg(long, conflicts_with_all = ["problem", "method"])]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    problem: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "config")]
    method: Option<Method>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solve the divergence-constrained problem through the multiplier search.
    #[arg(long)]
    constrained: bool,
    #[arg(long, value_enum, default_value_t = Preset::Practical)]
    preset: Preset,
    /// Outer-loop constant override, `name=value`; repeatable.
    #[arg(long = "set", value_parser = parse_override)]
    overrides: Vec<(String, f64)>,
    /// Iteration budget for the comparison methods.
    #[arg(long)]
    iters: Option<u64>,
    /// Primal-dual step multiplier.
    #[arg(long, default_value_t = 1.0)]
    step_scale: f64,
    /// Keep every k-th trace record.
    #[arg(long, default_value_t = 1)]
    stride: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Target gap; defaults to the problem's eps.
    #[arg(long)]
    target: Option<f64>,
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(a) => {
            let spec = GenerateSpec {
                family: a.family,
                n: a.n,
                d: a.d,
                m: a.m,
                divergence: a.divergence,
                nu: a.nu,
                constrained: a.constrained,
                huber: a.huber,
                eps: a.eps,
                seed: a.seed,
                reference: a.reference,
            };
            let file = generate(&spec)?;
            let path = a.out.unwrap_or_else(|| {
                let fam = a.family.to_possible_value().expect("no skipped variants");
                let fam = fam.get_name();
                cli.out_dir.join(format!("{fam}-n{}-d{}-seed{}.json", a.n, a.d, a.seed))
            });
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, file.to_json()).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
        Command::Run(a) => {
            let cfg = match a.config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig {
                    problem: a.problem.expect("required by clap"),
                    method: a.method.expect("required by clap"),
                    eps: a.eps,
                    seed: a.seed,
                    constrained: a.constrained,
                    preset: a.preset,
                    overrides: a.overrides.into_iter().collect(),
                    iters: a.iters,
                    step_scale: a.step_scale,
                    stride: a.stride,
                    out: a.out,
                },
            };
            let (path, meta) = run(&cfg, &cli.out_dir)?;
            let gap = meta.certified_gap.map_or("n/a".to_string(), |g| format!("{g:.4e}"));
            println!(
                "{} objective {:.6} gap {} evals {} value + {} subgrad -> {}",
                meta.method,
                meta.objective,
                gap,
                meta.evals_value,
                meta.evals_subgrad,
                path.display()
            );
        }
        Command::Compare(a) => {
            if a.target.is_some_and(|t| !(t > 0.0)) {
                bail!("target must be positive");
            }
            print!("{}", compare(&a.traces, a.target)?.render());
        }
    }
    Ok(())
}
