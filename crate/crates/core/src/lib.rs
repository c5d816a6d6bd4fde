//! Off-policy evaluation for panel data whose dynamics drift over time and
//! differ across individuals.
//!
//! The main estimator runs backward induction through two-way fixed-effects
//! sieve regressions ([`model_free`]); [`model_based`] fits a three-component
//! mixture transition model by EM and rolls it out. [`baselines`] holds the
//! comparison estimators, [`envsim`] synthetic environments with exact and
//! Monte-Carlo ground truth, and [`harness`] the replication runner.

pub mod baselines;
pub mod data;
pub mod envsim;
pub mod error;
pub mod estimand;
pub mod harness;
pub mod linalg;
pub mod model_based;
pub mod model_free;
pub mod policy;
pub mod rng;
pub mod sieve;

pub use data::{read_csv, validate_trajectories, IngestOptions, ObsKind, ObsKindHint, TrajectorySet, Violation};
pub use error::{Error, Result};
pub use estimand::{EstimandFamily, EstimandTarget, ValueReport};
pub use policy::{policy_probs, Policy, PolicySpec};
pub use sieve::{BasisSpec, StagePanel, TwoWayFit};
