use anyhow::Result;
use clap::ValueEnum;
use dro_core::instance::{self, DivergenceSpec, ProblemFile};

use crate::reference::reference_optimum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    /// Maximum of linear losses, one group per loss.
    MaxOfLinear,
    /// Hinge losses in overlapping groups.
    HingeGroups,
    /// Logistic losses in overlapping groups.
    SmoothGroups,
    /// Absolute or Huber regression residuals under an f-divergence.
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub divergence: String,
    pub nu: f64,
    pub constrained: bool,
    pub huber: Option<f64>,
    pub eps: f64,
    pub seed: u64,
    pub reference: bool,
}

pub fn generate(spec: &GenerateSpec) -> Result<ProblemFile> {
    let mut file = match spec.family {
        Family::MaxOfLinear => instance::max_of_linear(spec.n, spec.d, spec.eps, spec.seed)?,
        Family::HingeGroups => instance::overlapping_hinge_groups(spec.n, spec.m, spec.d, spec.eps, spec.seed)?,
        Family::SmoothGroups => instance::smooth_groups(spec.n, spec.m, spec.d, spec.eps, spec.seed)?,
        Family::Regression => {
            let div = DivergenceSpec { name: spec.divergence.clone(), nu: spec.nu, constrained: spec.constrained };
            instance::regression(spec.n, spec.d, div, spec.huber, spec.eps, spec.seed)?
        }
    };
    if spec.reference {
        let problem = file.build()?;
        file.reference_optimum = Some(reference_optimum(&problem)?);
    }
    Ok(file)
}
