//! Federated ADMM and its Bayesian generalization over Gaussian exponential families.
//!
//! The crate is layered bottom-up:
//!
//! - [`expfam`]: dual maps between natural and expectation coordinates, KL, sampling.
//! - [`losses`]: client losses and their expected moments under a Gaussian.
//! - [`solvers`]: inner solvers for one client subproblem.
//! - [`federation`]: round engines for every method plus the fixed-point verifier.
//! - [`harness`]: datasets, splits, oracles and metrics.
//! - [`trace`]: JSON-lines round records.

// `!(x > 0.0)` is used on purpose: NaN must fail every positivity check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expfam;
pub mod federation;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod solvers;
pub mod trace;

pub use error::{Error, Result};
pub use expfam::{DualVec, ExpParam, FamilyDescriptor, FamilyKind, NatParam};
