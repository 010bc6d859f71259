//! Exit-time stochastic control on bounded space-time cylinders.
//!
//! Monte Carlo value functions for controlled diffusions killed on leaving
//! `Q = [0,T) × O`, the soft-killed penalized values `V^ε`, an explicit
//! monotone finite-difference HJB solver, pointwise boundary-regularity
//! checks, and statistical diagnostics for the exit behaviour behind them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod geometry;
pub mod hjb;
pub mod model;
pub mod regularity;
pub mod rng;
pub mod simulate;
pub mod value;

pub use error::{Error, Result};
pub use field::{Axis, Provenance, ValueField};
pub use geometry::{DomainShape, GradMode, Region, SpaceDomain, SpaceTimeDomain};
pub use model::{builtin_scenario, ControlSet, FnModel, Policy, Scenario, SdeModel};
pub use simulate::{ExitDetection, ExitFace, PathBatch, SimConfig};
