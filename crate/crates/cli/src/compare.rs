use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Result};
use dro_core::trace::TraceRecord;

use crate::run::{read_trace, TraceMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub seed: u64,
    /// Total evaluations when the gap first reached the target.
    pub evals_to_target: Option<u64>,
    pub final_gap: f64,
    pub total_evals: u64,
}

/// First record whose gap is at most `target`, scanning in evaluation order.
pub fn evals_to_target(records: &[TraceRecord], target: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.gap_estimate <= target)
        .map(|r| r.evals_value + r.evals_subgrad)
}

/// Best gap reached within `budget` total evaluations.
pub fn gap_at(records: &[TraceRecord], budget: u64) -> Option<f64> {
    records
        .iter()
        .take_while(|r| r.evals_value + r.evals_subgrad <= budget)
        .map(|r| r.gap_estimate)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.min(g))))
}

pub struct Comparison {
    pub target: f64,
    pub rows: Vec<Row>,
    /// Evaluation checkpoints and, per trace, the best gap reached by each.
    pub checkpoints: Vec<u64>,
    pub aligned: Vec<Vec<Option<f64>>>,
}

/// Loads traces of one problem and tabulates evaluations to `target` (default: the
/// problem's eps). Traces of different problems or without a reference optimum are errors.
pub fn compare(paths: &[PathBuf], target: Option<f64>) -> Result<Comparison> {
    if paths.is_empty() {
        bail!("no traces given");
    }
    let loaded: Vec<(Vec<TraceRecord>, TraceMeta)> = paths.iter().map(|p| read_trace(p)).collect::<Result<_>>()?;
    let first = &loaded[0].1;
    for (path, (_, meta)) in paths.iter().zip(&loaded) {
        if meta.problem_fingerprint != first.problem_fingerprint {
            bail!(
                "{} was run on problem {} but {} on {}",
                path.display(),
                meta.problem_fingerprint,
                paths[0].display(),
                first.problem_fingerprint
            );
        }
        if meta.reference_optimum.is_none() {
            bail!("{} has no reference optimum, so gaps are unknown", path.display());
        }
    }
    let target = target.unwrap_or(first.eps);
    let rows = loaded
        .iter()
        .map(|(recs, meta)| Row {
            method: meta.method.clone(),
            seed: meta.seed,
            evals_to_target: evals_to_target(recs, target),
            final_gap: meta.certified_gap.unwrap_or(f64::NAN),
            total_evals: meta.evals_value + meta.evals_subgrad,
        })
        .collect::<Vec<_>>();
    let max_evals = rows.iter().map(|r| r.total_evals).max().unwrap_or(1).max(1);
    let mut checkpoints = Vec::new();
    let mut c = 1u64;
    while c < max_evals {
        checkpoints.push(c);
        c *= 4;
    }
    checkpoints.push(max_evals);
    let aligned = loaded
        .iter()
        .map(|(recs, _)| checkpoints.iter().map(|&b| gap_at(recs, b)).collect())
        .collect();
    Ok(Comparison { target, rows, checkpoints, aligned })
}

fn median(mut v: Vec<u64>) -> Option<u64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    Some(v[v.len() / 2])
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "target gap {:.3e}", self.target);
        let _ = writeln!(s, "{:<22} {:>6} {:>16} {:>12} {:>14}", "method", "seed", "evals_to_target", "final_gap", "total_evals");
        for r in &self.rows {
            let e = r.evals_to_target.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{:<22} {:>6} {:>16} {:>12.3e} {:>14}", r.method, r.seed, e, r.final_gap, r.total_evals);
        }
        let mut methods: Vec<&str> = self.rows.iter().map(|r| r.method.as_str()).collect();
        methods.dedup();
        methods.sort_unstable();
        methods.dedup();
        let _ = writeln!(s, "\n{:<22} {:>8} {:>16}", "method", "reached", "median_evals");
        for m in methods {
            let runs: Vec<&Row> = self.rows.iter().filter(|r| r.method == m).collect();
            let hits: Vec<u64> = runs.iter().filter_map(|r| r.evals_to_target).collect();
            let med = if hits.len() == runs.len() { median(hits.clone()) } else { None };
            let _ = writeln!(
                s,
                "{:<22} {:>8} {:>16}",
                m,
                format!("{}/{}", hits.len(), runs.len()),
                med.map_or("-".to_string(), |v| v.to_string())
            );
        }
        let _ = write!(s, "\n{:<14}", "evals");
        for r in &self.rows {
            let _ = write!(s, " {:>22}", format!("{}#{}", r.method, r.seed));
        }
        let _ = writeln!(s);
        for (k, c) in self.checkpoints.iter().enumerate() {
            let _ = write!(s, "{c:<14}");
            for row in &self.aligned {
                let _ = write!(s, " {:>22}", row[k].map_or("-".to_string(), |g| format!("{g:.3e}")));
            }
            let _ = writeln!(s);
        }
        s
    }
}
