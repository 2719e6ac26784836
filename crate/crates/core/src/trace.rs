//! Convergence traces: cumulative metered evaluation counts against objective values.
//!
//! Objective values in a trace are measured with unmetered evaluations, so recording
//! never changes the counts being recorded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::problem::{Counts, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub evals_value: u64,
    pub evals_subgrad: u64,
    /// `objective - reference`, or NaN without a reference optimum.
    pub gap_estimate: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub method: String,
    pub records: Vec<TraceRecord>,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Final gap against a configured reference optimum.
    pub certified_gap: Option<f64>,
    pub evals: Counts,
    pub wall_secs: f64,
}

impl SolverTrace {
    /// Total evaluations at the first record whose gap is at most `target`.
    pub fn evals_to_gap(&self, target: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.gap_estimate <= target)
            .map(|r| r.evals_value + r.evals_subgrad)
    }
}

/// Collects records during a run.
pub struct TraceRecorder<'p> {
    problem: &'p Problem,
    reference: Option<f64>,
    start: Counts,
    clock: Instant,
    stride: u64,
    calls: u64,
    records: Vec<TraceRecord>,
}

impl<'p> TraceRecorder<'p> {
    /// Counts are measured from the moment of construction.
    pub fn new(problem: &'p Problem, reference: Option<f64>) -> Self {
        Self {
            problem,
            reference,
            start: problem.ensemble.counts(),
            clock: Instant::now(),
            stride: 1,
            calls: 0,
            records: Vec::new(),
        }
    }

    /// Keep only every `stride`-th record (the final one is always kept).
    pub fn with_stride(mut self, stride: u64) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn counts(&self) -> Counts {
        self.problem.ensemble.counts().since(self.start)
    }

    fn make(&self, x: &[f64]) -> Result<TraceRecord> {
        let c = self.counts();
        let objective = self.problem.peek_true_objective(x)?;
        Ok(TraceRecord {
            evals_value: c.value_evals,
            evals_subgrad: c.subgrad_evals,
            gap_estimate: self.reference.map_or(f64::NAN, |r| objective - r),
            objective,
        })
    }

    pub fn record(&mut self, x: &[f64]) -> Result<()> {
        let keep = self.calls % self.stride == 0;
        self.calls += 1;
        if keep {
            let rec = self.make(x)?;
            self.records.push(rec);
        }
        Ok(())
    }

    pub fn finish(mut self, method: &str, x: Vec<f64>) -> Result<SolverTrace> {
        let last = self.make(&x)?;
        if self.records.last() != Some(&last) {
            self.records.push(last);
        }
        Ok(SolverTrace {
            method: method.to_string(),
            objective: last.objective,
            certified_gap: self.reference.map(|r| last.objective - r),
            evals: self.counts(),
            wall_secs: self.clock.elapsed().as_secs_f64(),
            records: self.records,
            x,
        })
    }
}
