use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use dro_core::accel::AccelConstants;
use dro_core::instance::ProblemFile;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BallAccelEpochsgd,
    BallAccelVr,
    Subgradient,
    PrimalDual,
    AgdSoftmax,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::BallAccelEpochsgd => "ball-accel-epochsgd",
            Method::BallAccelVr => "ball-accel-vr",
            Method::Subgradient => "subgradient",
            Method::PrimalDual => "primal-dual",
            Method::AgdSoftmax => "agd-softmax",
        }
    }

    pub fn is_ball_accel(self) -> bool {
        matches!(self, Method::BallAccelEpochsgd | Method::BallAccelVr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Constants as stated in the analysis.
    Reference,
    /// Looser constants that keep runs short.
    #[default]
    Practical,
}

/// Everything a run depends on. Serialized next to every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: PathBuf,
    pub method: Method,
    /// Overrides the accuracy stored in the problem file.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub constrained: bool,
    #[serde(default)]
    pub preset: Preset,
    /// Outer-loop constants by field name.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    /// Iteration budget for the comparison methods.
    #[serde(default)]
    pub iters: Option<u64>,
    /// Primal-dual step multiplier.
    #[serde(default = "one")]
    pub step_scale: f64,
    #[serde(default = "one_u64")]
    pub stride: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing run config {}", path.display()))
    }

    pub fn constants(&self) -> Result<AccelConstants> {
        let base = match self.preset {
            Preset::Reference => AccelConstants::default(),
            Preset::Practical => AccelConstants::practical(),
        };
        apply_overrides(base, &self.overrides)
    }
}

/// Sets named fields of `base`; unknown names and non-finite values are rejected.
pub fn apply_overrides(base: AccelConstants, overrides: &BTreeMap<String, f64>) -> Result<AccelConstants> {
    let mut value = serde_json::to_value(base)?;
    let fields = value.as_object_mut().expect("constants serialize to an object");
    for (key, v) in overrides {
        if !fields.contains_key(key) {
            let known: Vec<&str> = fields.keys().map(String::as_str).collect();
            bail!("unknown constant `{key}` (known: {})", known.join(", "));
        }
        if !v.is_finite() {
            bail!("constant `{key}` must be finite, got {v}");
        }
        fields.insert(key.clone(), serde_json::json!(v));
    }
    Ok(serde_json::from_value(value)?)
}

/// Parses `name=value`.
pub fn parse_override(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value in `{s}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

pub fn load_problem(path: &std::path::Path) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ProblemFile::from_json(&text)?)
}

/// Hex digest of a problem file's canonical JSON, used to match traces to problems.
pub fn fingerprint(file: &ProblemFile) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(file.to_json().as_bytes());
    digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
}
