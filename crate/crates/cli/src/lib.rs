//! Instance generation, metered runs and trace comparison for the `dro-core` solvers.

pub mod compare;
pub mod config;
pub mod generate;
pub mod reference;
pub mod run;

/// Environment variable naming the directory for traces and generated problems.
pub const OUT_DIR_ENV: &str = "DROBENCH_OUT_DIR";
