//! Cox regression from time-restricted nested case-control samples.
//!
//! The crate simulates cohorts under a proportional hazards model with
//! time-varying covariates, draws nested case-control samples from them, and
//! fits three estimators of the regression parameter: the full-cohort Cox
//! estimator, Thomas' estimator on the sampled risk sets, and a
//! kernel-weighted estimator that borrows controls from neighbouring failure
//! times.

pub mod error;
pub mod estimators;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod theory;

pub use nalgebra;
pub use error::{Error, NonConvergence, Result};
pub use estimators::{cox_fit, proposed_fit, thomas_fit, FitResult};
pub use kernel::{Bandwidth, Kernel, KernelConfig, KernelShape};
pub use model::{Cohort, CovariatePath, NccDataset, NccRecord, ShortfallPolicy, Subject};
pub use sim::{generate_cohort, sample_ncc, Censoring, ScenarioConfig};
pub use solver::SolverOptions;
