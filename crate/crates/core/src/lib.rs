//! Spatio-temporal GPU multiplexing for DNN inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`analytic_model`]: a parameterised kernel-level DNN execution model and
//!   the knee metric derived from it.
//! - [`profiles`]: measured (or synthesised) latency grids `f_L(gpu%, batch)`
//!   and the built-in model catalog.
//! - [`batch_optimizer`]: efficacy maximisation over the profile grid under
//!   SLO constraints.
//! - [`schedulers`]: session schedule constructors (temporal, static spatial,
//!   weighted max-min, D-STACK and the kernel-level ideal oracle).
//! - [`simulator`]: a deterministic discrete-event engine that drives request
//!   arrivals through those schedulers on one or more simulated GPUs.

// negated float comparisons are deliberate: they reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic_model;
pub mod batch_optimizer;
pub mod error;
pub mod profiles;
pub mod schedulers;
pub mod simulator;

pub use error::{Error, Result};
