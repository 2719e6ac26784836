//! Solvers for convex distributionally robust optimization over a finite family of losses.
//!
//! Two robust objectives are supported: the worst group average of losses (group DRO) and
//! the worst reweighting within an f-divergence penalty or ball. Both are minimized by an
//! accelerated proximal-point outer loop that only talks to a ball-constrained regularized
//! oracle, with the oracles implemented by stochastic methods that touch a constant number
//! of losses per step. Every loss value and subgradient goes through a shared counter.

pub mod accel;
pub mod baselines;
pub mod broo;
pub mod broo_fdiv;
pub mod broo_group;
pub mod constrained;
pub mod divergence;
pub mod error;
pub mod estimators;
pub mod instance;
pub mod linalg;
pub mod problem;
pub mod rng;
pub mod trace;

pub use error::{DroError, Result};
